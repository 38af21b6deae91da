"""Root ORAM: tunable, differentially private tree ORAM.

The client state machine lives in :mod:`rootoram.protocol`, the server side in
:mod:`rootoram.storage` and :mod:`rootoram.netserve`.  Closed-form privacy
accounting is in :mod:`rootoram.privacy` and the exact probability model used to
check it in :mod:`rootoram.oracle`.
"""

from rootoram.core import INFINITE, Params, ParameterError, TreeShape, derive_tree_shape
from rootoram.protocol import AccessRequest, AccessTrace, ORAMClient, Op
from rootoram.storage import AesGcmCipher, MemoryBackend, NullCipher

__all__ = [
    "INFINITE",
    "AccessRequest",
    "AccessTrace",
    "AesGcmCipher",
    "MemoryBackend",
    "NullCipher",
    "ORAMClient",
    "Op",
    "Params",
    "ParameterError",
    "TreeShape",
    "derive_tree_shape",
]

__version__ = "0.1.0"
