"""Server-side bucket storage and the block envelope.

Every block slot on the server holds a fixed-size *envelope*.  The plaintext
record inside is ``kind (u8) | block id (u64) | payload (B bytes)``; with the
authenticated cipher the whole record is encrypted, so real and dummy blocks
are indistinguishable without the key.  The null cipher stores the record as is
and exists for fast, deterministic simulation.
"""

from __future__ import annotations

import abc
import os
import struct
from typing import BinaryIO, Callable, NamedTuple, Optional, Sequence, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from rootoram.core import Params, derive_tree_shape, path_indices

RECORD = struct.Struct("<BQ")
KIND_DUMMY = 0
KIND_REAL = 1

NONCE_SIZE = 12
TAG_SIZE = 16


class StorageError(OSError):
    pass


class StoreNotInitialized(StorageError):
    pass


class ProtocolError(ValueError):
    """A request has the wrong shape for the store it targets."""


class AuthenticationError(ValueError):
    """An envelope failed authentication."""


class Block(NamedTuple):
    block_id: Optional[int]
    payload: bytes

    @property
    def is_dummy(self) -> bool:
        return self.block_id is None

    @classmethod
    def dummy(cls, size: int) -> "Block":
        return cls(None, bytes(size))


def _record(block: Block) -> bytes:
    if block.block_id is None:
        return RECORD.pack(KIND_DUMMY, 0) + block.payload
    return RECORD.pack(KIND_REAL, block.block_id) + block.payload


def _parse(record: bytes) -> Block:
    kind, block_id = RECORD.unpack_from(record)
    if kind == KIND_DUMMY:
        return Block(None, record[RECORD.size:])
    if kind != KIND_REAL:
        raise AuthenticationError(f"unknown block kind {kind}")
    return Block(block_id, record[RECORD.size:])


class NullCipher:
    """Identity transform: envelope = record header | payload."""

    overhead = RECORD.size

    def seal(self, block: Block) -> bytes:
        return _record(block)

    def open(self, envelope: bytes) -> Block:
        return _parse(envelope)


class AesGcmCipher:
    """AES-GCM with a fresh random nonce for every seal."""

    overhead = RECORD.size + NONCE_SIZE + TAG_SIZE

    def __init__(self, key: Optional[bytes] = None):
        self.key = key if key is not None else AESGCM.generate_key(bit_length=128)
        self._aead = AESGCM(self.key)

    def seal(self, block: Block, nonce: Optional[bytes] = None) -> bytes:
        if nonce is None:
            nonce = os.urandom(NONCE_SIZE)
        return nonce + self._aead.encrypt(nonce, _record(block), None)

    def open(self, envelope: bytes) -> Block:
        try:
            record = self._aead.decrypt(envelope[:NONCE_SIZE], envelope[NONCE_SIZE:], None)
        except InvalidTag:
            raise AuthenticationError("envelope failed authentication") from None
        return _parse(record)


Cipher = Union[NullCipher, AesGcmCipher]


def seal(block: Block, key: Optional[bytes], nonce: Optional[bytes] = None) -> bytes:
    """Seal one block; ``key=None`` selects the null cipher."""
    if key is None:
        return NullCipher().seal(block)
    return AesGcmCipher(key).seal(block, nonce)


def open_envelope(envelope: bytes, key: Optional[bytes]) -> Block:
    if key is None:
        return NullCipher().open(envelope)
    return AesGcmCipher(key).open(envelope)


def envelope_size(params: Params, cipher: Cipher) -> int:
    return params.B + cipher.overhead


Bucket = list  # list of Z envelopes (bytes)


class StorageBackend(abc.ABC):
    """Path-granular view of the server tree."""

    params: Params
    envelope_size: int

    @abc.abstractmethod
    def read_path(self, leaf: int) -> list[Bucket]:
        """Return the ``k+1`` buckets on the path to ``leaf``, root first."""

    @abc.abstractmethod
    def write_path(self, leaf: int, buckets: Sequence[Bucket]) -> None:
        """Replace the ``k+1`` buckets on the path to ``leaf``."""

    def format(self, make_dummy: Callable[[], bytes]) -> None:
        """Fill every bucket with fresh dummy envelopes."""
        p = self.params
        # every leaf bucket lies on exactly one path, so all N paths are needed
        for leaf in range(p.N):
            self.write_path(leaf, [[make_dummy() for _ in range(p.Z)] for _ in range(p.k + 1)])

    def close(self) -> None:
        pass

    def check_shape(self, leaf: int, buckets: Sequence[Bucket]) -> None:
        p = self.params
        if not 0 <= leaf < p.N:
            raise ProtocolError(f"leaf {leaf} outside [0, {p.N})")
        if len(buckets) != p.k + 1:
            raise ProtocolError(f"expected {p.k + 1} buckets, got {len(buckets)}")
        for bucket in buckets:
            if len(bucket) != p.Z:
                raise ProtocolError(f"expected {p.Z} envelopes per bucket, got {len(bucket)}")
            for env in bucket:
                if len(env) != self.envelope_size:
                    raise ProtocolError(
                        f"envelope of {len(env)} bytes, expected {self.envelope_size}"
                    )


class MemoryBackend(StorageBackend):
    """Flat in-process array of buckets, indexed as in :mod:`rootoram.core`."""

    def __init__(self, params: Params, envelope_size: int):
        self.params = params
        self.envelope_size = envelope_size
        self.shape = derive_tree_shape(params)
        self.buckets: list[Optional[list[bytes]]] = [None] * self.shape.total_buckets
        self._paths: dict[int, list[int]] = {}

    @classmethod
    def for_cipher(cls, params: Params, cipher: Cipher) -> "MemoryBackend":
        return cls(params, envelope_size(params, cipher))

    def _path(self, leaf: int) -> list[int]:
        idx = self._paths.get(leaf)
        if idx is None:
            if not 0 <= leaf < self.params.N:
                raise ProtocolError(f"leaf {leaf} outside [0, {self.params.N})")
            idx = self._paths[leaf] = path_indices(self.params, leaf)
        return idx

    def read_path(self, leaf: int) -> list[Bucket]:
        out = []
        for i in self._path(leaf):
            bucket = self.buckets[i]
            if bucket is None:
                raise StoreNotInitialized(f"bucket {i} has never been written")
            out.append(list(bucket))
        return out

    def write_path(self, leaf: int, buckets: Sequence[Bucket]) -> None:
        self.check_shape(leaf, buckets)
        for i, bucket in zip(self._path(leaf), buckets):
            self.buckets[i] = list(bucket)

    def format(self, make_dummy: Callable[[], bytes]) -> None:
        Z = self.params.Z
        self.buckets = [[make_dummy() for _ in range(Z)] for _ in range(self.shape.total_buckets)]

    @property
    def initialized(self) -> bool:
        return all(b is not None for b in self.buckets)

    def serialized_size(self) -> int:
        return SNAPSHOT_HEADER.size + self.shape.total_buckets * self.params.Z * self.envelope_size


# Snapshot: header then every bucket's envelopes in index order.
SNAPSHOT_MAGIC = b"RORM"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct("<4sHBBHI")


def save_snapshot(store: MemoryBackend, out: Union[str, os.PathLike, BinaryIO]) -> None:
    if not store.initialized:
        raise StoreNotInitialized("cannot snapshot an unformatted store")
    p = store.params
    if isinstance(out, (str, os.PathLike)):
        with open(out, "wb") as fh:
            save_snapshot(store, fh)
        return
    out.write(SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, p.L, p.k, p.Z, p.B))
    for bucket in store.buckets:
        out.write(b"".join(bucket))


def load_snapshot(src: Union[str, os.PathLike, BinaryIO], p: float = 0.5, lam="inf") -> MemoryBackend:
    """Rebuild a :class:`MemoryBackend` from a snapshot.

    The snapshot carries only the tree geometry; ``p`` and ``lam`` are client
    side and only fill in the returned ``params``.
    """
    if isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as fh:
            return load_snapshot(fh, p, lam)
    raw = src.read()
    if len(raw) < SNAPSHOT_HEADER.size:
        raise StorageError("snapshot truncated before header")
    magic, version, L, k, Z, B = SNAPSHOT_HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise StorageError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise StorageError(f"unsupported snapshot version {version}")
    params = Params(L=L, k=k, p=min(p, 1 - 1 / (1 << L)), Z=Z, B=B, lam=lam)
    shape = derive_tree_shape(params)
    body = memoryview(raw)[SNAPSHOT_HEADER.size:]
    slots = shape.total_buckets * Z
    if len(body) % slots:
        raise StorageError("snapshot body is not a whole number of envelopes")
    esize = len(body) // slots
    if esize < B:
        raise StorageError("snapshot envelopes smaller than the block size")
    store = MemoryBackend(params, esize)
    store.buckets = [
        [bytes(body[(b * Z + j) * esize:(b * Z + j + 1) * esize]) for j in range(Z)]
        for b in range(shape.total_buckets)
    ]
    return store
