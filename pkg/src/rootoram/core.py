"""Parameters, tree geometry and bucket indexing.

The server tree is a complete binary tree of depth ``k`` (levels ``0..k-1``)
whose ``2**(k-1)`` bottom nodes each carry ``2**(L-k+1)`` leaf buckets.  Leaf
buckets are numbered ``0..N-1`` and sit at level ``k``.

Buckets are addressed by a flat index: the internal tree in heap order at
``[0, 2**k - 1)``, followed by the leaf buckets, so leaf ``x`` lives at
``2**k - 1 + x``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Union


class ParameterError(ValueError):
    """A parameter or argument lies outside its domain."""


class FakeRate(enum.Enum):
    INFINITE = "inf"

    def __repr__(self) -> str:
        return "INFINITE"

    def __str__(self) -> str:
        return "inf"


#: Fake-access rate meaning "never issue fake accesses".
INFINITE = FakeRate.INFINITE

Rate = Union[float, FakeRate]


def parse_rate(value) -> Rate:
    """Accept a positive number, ``INFINITE`` or the strings ``inf``/``infinite``."""
    if value is INFINITE:
        return INFINITE
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinite", "infinity", "∞"):
            return INFINITE
        value = float(value)
    value = float(value)
    if math.isinf(value) and value > 0:
        return INFINITE
    if not value > 0:
        raise ParameterError(f"lambda must be positive or INFINITE, got {value}")
    return value


def parse_probability(value) -> Union[float, Fraction]:
    """Parse ``p`` from a number or an ``a/b`` string; ratios stay exact."""
    if isinstance(value, (Fraction, float, int)):
        return value
    text = str(value).strip()
    if "/" in text:
        return Fraction(text)
    return float(text)


@dataclass(frozen=True)
class Params:
    """Protocol parameters.

    ``L`` fixes ``N = 2**L``; ``k`` is the depth of the binary part of the tree,
    ``p`` the remap probability, ``Z`` the bucket size, ``B`` the payload size
    in bytes and ``lam`` the mean number of real accesses per fake access.
    """

    L: int
    k: int
    p: Union[float, Fraction]
    Z: int = 4
    B: int = 16
    lam: Rate = INFINITE

    def __post_init__(self):
        if not isinstance(self.L, int) or self.L < 1:
            raise ParameterError(f"L must be a positive integer, got {self.L!r}")
        if not isinstance(self.k, int) or not 1 <= self.k <= self.L:
            raise ParameterError(f"k must be an integer in [1, L={self.L}], got {self.k!r}")
        if self.Z < 1:
            raise ParameterError(f"Z must be >= 1, got {self.Z}")
        if self.B < 1:
            raise ParameterError(f"B must be >= 1, got {self.B}")
        object.__setattr__(self, "lam", parse_rate(self.lam))
        p = parse_probability(self.p)
        object.__setattr__(self, "p", p)
        upper = 1 - Fraction(1, self.N)
        if not 0 < p <= upper + (0 if isinstance(p, Fraction) else 1e-12):
            raise ParameterError(f"p must lie in (0, 1 - 1/N = {float(upper)}], got {p}")

    @property
    def N(self) -> int:
        return 1 << self.L

    @property
    def p1(self):
        """Probability of keeping the current leaf on remap."""
        return 1 - self.p

    @property
    def p2(self):
        """Probability of moving to one specific other leaf on remap."""
        return self.p / (self.N - 1)

    @property
    def leaf_shift(self) -> int:
        # leaf x hangs below bottom internal node x >> leaf_shift
        return self.L - self.k + 1

    @classmethod
    def path_oram(cls, L: int, Z: int = 4, B: int = 16) -> "Params":
        """The complete-tree, uniform-remap, no-fake parameterisation."""
        return cls(L=L, k=L, p=1 - Fraction(1, 1 << L), Z=Z, B=B, lam=INFINITE)

    def replace(self, **changes) -> "Params":
        fields = dict(L=self.L, k=self.k, p=self.p, Z=self.Z, B=self.B, lam=self.lam)
        fields.update(changes)
        return Params(**fields)


@dataclass(frozen=True)
class TreeShape:
    internal_node_count: int
    leaf_bucket_count: int
    total_buckets: int
    path_length_buckets: int
    leaf_fanout: int


@dataclass(frozen=True, order=True)
class BucketId:
    index: int
    level: int


def derive_tree_shape(params: Params) -> TreeShape:
    internal = (1 << params.k) - 1
    return TreeShape(
        internal_node_count=internal,
        leaf_bucket_count=params.N,
        total_buckets=internal + params.N,
        path_length_buckets=params.k + 1,
        leaf_fanout=1 << params.leaf_shift,
    )


def _check_leaf(params: Params, leaf: int) -> None:
    if not 0 <= leaf < params.N:
        raise ParameterError(f"leaf {leaf} outside [0, {params.N})")


def path_indices(params: Params, leaf: int) -> list[int]:
    """Flat bucket indices of the path to ``leaf``, root first."""
    k = params.k
    parent = leaf >> params.leaf_shift
    out = [(1 << i) - 1 + (parent >> (k - 1 - i)) for i in range(k)]
    out.append((1 << k) - 1 + leaf)
    return out


def path_buckets(params: Params, leaf: int) -> list[BucketId]:
    _check_leaf(params, leaf)
    return [BucketId(index, level) for level, index in enumerate(path_indices(params, leaf))]


def common_depth(params: Params, x: int, z: int) -> int:
    """Level of the deepest bucket shared by the paths to ``x`` and ``z``."""
    if x == z:
        return params.k
    diff = (x >> params.leaf_shift) ^ (z >> params.leaf_shift)
    return params.k - 1 - diff.bit_length()


def lowest_common_bucket(params: Params, x: int, z: int) -> BucketId:
    _check_leaf(params, x)
    _check_leaf(params, z)
    level = common_depth(params, x, z)
    return BucketId(path_indices(params, x)[level], level)


def bucket_level(params: Params, index: int) -> int:
    if index >= (1 << params.k) - 1:
        return params.k
    return (index + 1).bit_length() - 1


def leaves_under(params: Params, index: int) -> range:
    """Leaves whose paths pass through bucket ``index``."""
    internal = (1 << params.k) - 1
    if index >= internal:
        leaf = index - internal
        return range(leaf, leaf + 1)
    level = bucket_level(params, index)
    pos = index - ((1 << level) - 1)
    span = 1 << (params.k - 1 - level + params.leaf_shift)
    return range(pos * span, (pos + 1) * span)
