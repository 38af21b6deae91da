"""Exact probability model of the observed leaf sequence.

The adversary is assumed to see every access, fakes included, together with
the element behind it.  Under that model the probability that a real sequence
produces an observed leaf sequence is a product of one factor per access:

* ``1/N`` the first time an element is touched,
* ``p1 = 1 - p`` when it is seen again on the same leaf as last time,
* ``p2 = p / (N - 1)`` when it is seen again on a different leaf,

and the whole product drops to zero as soon as more than ``capacity`` elements
are mapped to one leaf at the same time.

With rational ``p`` everything here is computed with :class:`fractions.Fraction`
so bounds are checked exactly.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Optional, Sequence, Union

from rootoram.core import INFINITE, Params, ParameterError
from rootoram.privacy import CapacityModel

Prob = Union[Fraction, float]


class _NoLeaf:
    """Marker for "this element has not been observed yet"."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "NONE"


NONE = _NoLeaf()


@dataclass(frozen=True)
class ModelParams:
    N: int
    p: Prob
    capacity: int

    def __post_init__(self):
        if self.N < 2:
            raise ParameterError(f"N must be >= 2, got {self.N}")
        if self.capacity < 1:
            raise ParameterError(f"capacity must be >= 1, got {self.capacity}")
        upper = 1 - Fraction(1, self.N)
        if not 0 < self.p <= upper + (0 if isinstance(self.p, Fraction) else 1e-12):
            raise ParameterError(f"p must lie in (0, {upper}], got {self.p}")

    @classmethod
    def from_protocol(cls, N: int, p: Prob, C: int, Z: int, k: int) -> "ModelParams":
        return cls(N, p, CapacityModel(C, Z, k).capacity)

    @property
    def p1(self) -> Prob:
        return 1 - self.p

    @property
    def p2(self) -> Prob:
        return self.p / (self.N - 1)

    @property
    def first_touch(self) -> Prob:
        return Fraction(1, self.N) if isinstance(self.p, Fraction) else 1 / self.N

    @property
    def M_k(self) -> int:
        return self.capacity + 1

    @property
    def bound(self) -> Prob:
        """``(p1/p2)**2``, the largest ratio the model allows between neighbours."""
        return (self.p1 / self.p2) ** 2


def _factors(model: ModelParams, real: Sequence, observed: Sequence) -> Optional[tuple[int, int, int]]:
    """Counts of (first-touch, same-leaf, moved) factors, or None if the product is 0."""
    if len(real) != len(observed):
        raise ParameterError("real and observed sequences differ in length")
    last: dict = {}
    load: Counter = Counter()
    first = same = moved = 0
    for element, leaf in zip(real, observed):
        if not 0 <= leaf < model.N:
            raise ParameterError(f"leaf {leaf} outside [0, {model.N})")
        prev = last.get(element, NONE)
        if prev is NONE:
            first += 1
        else:
            if prev == leaf:
                same += 1
            else:
                moved += 1
            load[prev] -= 1
        last[element] = leaf
        load[leaf] += 1
        if load[leaf] > model.capacity:
            return None
    return first, same, moved


def _value(model: ModelParams, counts: Optional[tuple[int, int, int]]) -> Prob:
    if counts is None:
        return Fraction(0) if isinstance(model.p, Fraction) else 0.0
    first, same, moved = counts
    return model.first_touch ** first * model.p1 ** same * model.p2 ** moved


def seq_probability(model: ModelParams, real: Sequence, observed: Sequence) -> Prob:
    """Probability that accessing ``real`` makes the server see ``observed``."""
    return _value(model, _factors(model, real, observed))


def modified_kronecker(model: ModelParams, z, x) -> Prob:
    """Selector that makes ``p2 + (p1 - p2) * delta`` the model's per-access factor.

    ``x`` is the previous leaf or :data:`NONE`; for :data:`NONE` the selector is
    ``(1/N - p2) / (p1 - p2)`` so the factor comes out as ``1/N``.
    """
    if x is NONE:
        if model.p1 == model.p2:
            raise ParameterError("selector undefined for uniform remapping (p1 == p2)")
        return (model.first_touch - model.p2) / (model.p1 - model.p2)
    return 1 if z == x else 0


def transition(model: ModelParams, z, x) -> Prob:
    """Probability of observing leaf ``z`` given previous leaf ``x`` (or NONE)."""
    if x is NONE and model.p1 == model.p2:
        return model.first_touch
    return model.p2 + (model.p1 - model.p2) * modified_kronecker(model, z, x)


# -- neighbour enumeration ---------------------------------------------------


@dataclass(frozen=True, order=True)
class Witness:
    r1: tuple
    r2: tuple
    observed: tuple

    @property
    def changed_at(self) -> int:
        return next(i for i, (a, b) in enumerate(zip(self.r1, self.r2)) if a != b)

    def leaves(self) -> dict:
        """Leaves around the changed access: l, l_pa, l_na, l_pb, l_nb."""
        i = self.changed_at
        a, b = self.r1[i], self.r2[i]
        o, r = self.observed, self.r1

        def prev(e):
            return next((o[j] for j in range(i - 1, -1, -1) if r[j] == e), NONE)

        def nxt(e):
            return next((o[j] for j in range(i + 1, len(r)) if r[j] == e), NONE)

        return {"l": o[i], "l_pa": prev(a), "l_na": nxt(a), "l_pb": prev(b), "l_nb": nxt(b)}

    def matches_pattern(self, allow_first_touch: bool = True) -> bool:
        """``l_na = l = l_pa`` and ``l_pb = l_nb != l``.

        A missing ``l_pa`` contributes ``1/N`` to both sides of the ratio, so by
        default it is accepted in place of ``l_pa = l``.
        """
        v = self.leaves()
        l = v["l"]
        pa_ok = v["l_pa"] == l or (allow_first_touch and v["l_pa"] is NONE)
        return (pa_ok and v["l_na"] == l and v["l_pb"] is not NONE
                and v["l_pb"] == v["l_nb"] and v["l_pb"] != l)


@dataclass
class RatioResult:
    max_ratio: Prob
    bound: Prob
    witness: Optional[Witness]
    maximizers: int
    pattern_witness: Optional[Witness] = None
    pairs_checked: int = 0
    strict_pattern_witness: Optional[Witness] = None

    @property
    def within_bound(self) -> bool:
        return self.max_ratio <= self.bound

    @property
    def attains_bound(self) -> bool:
        return self.max_ratio == self.bound


def max_ratio_bruteforce(model: ModelParams, M: int, element_count: int) -> RatioResult:
    """Largest ``Pr[r1 -> o] / Pr[r2 -> o]`` over neighbouring real sequences.

    Enumerates every real sequence of length ``M`` over ``element_count``
    elements, every neighbour differing in exactly one access, and every
    observed sequence; only pairs where both probabilities are positive count.
    The witness is the lexicographically smallest maximiser.
    """
    if model.N ** M * element_count ** M > 5_000_000:
        raise ParameterError("instance too large to enumerate")
    reals = list(product(range(element_count), repeat=M))
    observed = list(product(range(model.N), repeat=M))
    table = {r: [_factors(model, r, o) for o in observed] for r in reals}

    ratio_cache: dict = {}
    best: Prob = -1
    best_keys: list = []
    pairs = 0
    for r1 in reals:
        row1 = table[r1]
        for i in range(M):
            for e in range(element_count):
                if e == r1[i]:
                    continue
                r2 = r1[:i] + (e,) + r1[i + 1:]
                row2 = table[r2]
                for oi, (c1, c2) in enumerate(zip(row1, row2)):
                    if c1 is None or c2 is None:
                        continue
                    pairs += 1
                    diff = (c1[0] - c2[0], c1[1] - c2[1], c1[2] - c2[2])
                    ratio = ratio_cache.get(diff)
                    if ratio is None:
                        ratio = ratio_cache[diff] = _value(model, c1) / _value(model, c2)
                    if ratio > best:
                        best, best_keys = ratio, [(r1, r2, oi)]
                    elif ratio == best:
                        best_keys.append((r1, r2, oi))
    if not best_keys:
        return RatioResult(Fraction(0), model.bound, None, 0, None, pairs)
    witnesses = sorted(Witness(r1, r2, observed[oi]) for r1, r2, oi in best_keys)
    pattern = next((w for w in witnesses if w.matches_pattern()), None)
    strict = next((w for w in witnesses if w.matches_pattern(allow_first_touch=False)), None)
    return RatioResult(best, model.bound, witnesses[0], len(witnesses), pattern, pairs, strict)


# -- delta witness -----------------------------------------------------------


@dataclass(frozen=True)
class DeltaWitness:
    r1: tuple
    r2: tuple
    observed: tuple
    prob1: Prob
    prob2: Prob


def delta_witness(model: ModelParams, leaf: int = 0) -> DeltaWitness:
    """Neighbouring inputs where one output is impossible for one of them.

    ``r1`` touches ``M_k`` distinct elements, ``r2`` revisits the first one at
    the end; seeing every access on the same leaf rules out ``r1`` entirely.
    """
    m = model.M_k
    r1 = tuple(range(1, m + 1))
    r2 = tuple(range(1, m)) + (1,)
    o = (leaf,) * m
    prob1 = seq_probability(model, r1, o)
    prob2 = seq_probability(model, r2, o)
    expected = model.first_touch ** (m - 1) * model.p1
    if prob1 != 0 or prob2 != expected or not prob2 > 0:
        raise AssertionError(f"delta witness broken: {prob1}, {prob2} != {expected}")
    return DeltaWitness(r1, r2, o, prob1, prob2)


# -- channels and empirical comparison ----------------------------------------


def build_channel(model: ModelParams, M: int, element_count: int) -> dict:
    """Map each real sequence to its distribution over observed sequences."""
    observed = list(product(range(model.N), repeat=M))
    channel = {}
    for r in product(range(element_count), repeat=M):
        channel[r] = {o: seq_probability(model, r, o) for o in observed}
    return channel


@dataclass
class EmpiricalReport:
    N: int
    p: float
    transitions: int
    same_leaf_freq: float
    same_leaf_expected: float
    other_leaf_freqs: list = field(default_factory=list)  # by offset (z - x) mod N, 1..N-1
    other_leaf_expected: float = 0.0
    first_touch_freqs: list = field(default_factory=list)
    first_touch_samples: int = 0
    first_touch_counts: list = field(default_factory=list)

    @property
    def same_leaf_sigma(self) -> float:
        q = self.same_leaf_expected
        return math.sqrt(q * (1 - q) / self.transitions) if self.transitions else math.inf

    @property
    def max_abs_deviation(self) -> float:
        devs = [abs(self.same_leaf_freq - self.same_leaf_expected)]
        devs += [abs(f - self.other_leaf_expected) for f in self.other_leaf_freqs]
        devs += [abs(f - 1 / self.N) for f in self.first_touch_freqs]
        return max(devs)


def empirical_vs_model(params: Params, seed: int = 0, trials: int = 10_000,
                       address: Optional[int] = None, first_touch_runs: int = 200) -> EmpiricalReport:
    """Run the real client and tabulate what an observer of leaves would see.

    ``trials`` real accesses are made (all to ``address`` if given, otherwise
    uniformly random).  Consecutive observations of the same element give the
    same-leaf and moved-by-offset frequencies.  First-touch leaves come from
    the initial position maps of ``first_touch_runs`` fresh clients.
    """
    from rootoram.protocol import AccessRequest, ORAMClient
    from rootoram.storage import MemoryBackend, NullCipher

    params = params.replace(lam=INFINITE)
    N = params.N
    client = ORAMClient.setup(params, seed=seed, record_elements=True)
    rng = random.Random(seed ^ 0x5EED)
    addrs = ((address if address is not None else rng.randrange(N)) for _ in range(trials))
    client.access(AccessRequest.read(a) for a in addrs)

    last: dict = {}
    same = 0
    offsets = [0] * N
    transitions = 0
    for element, leaf, _fake in client.element_log:
        prev = last.get(element)
        if prev is not None:
            transitions += 1
            if prev == leaf:
                same += 1
            else:
                offsets[(leaf - prev) % N] += 1
        last[element] = leaf

    first_counts = [0] * N
    store = MemoryBackend.for_cipher(params, NullCipher())
    for run in range(first_touch_runs):
        fresh = ORAMClient(params, store, seed=(seed + 1) * 1_000_003 + run)
        for leaf in fresh.position:
            first_counts[leaf] += 1
    samples = sum(first_counts)
    return EmpiricalReport(
        N=N,
        p=float(params.p),
        transitions=transitions,
        same_leaf_freq=same / transitions if transitions else math.nan,
        same_leaf_expected=float(params.p1),
        other_leaf_freqs=[c / transitions for c in offsets[1:]] if transitions else [],
        other_leaf_expected=float(params.p2),
        first_touch_freqs=[c / samples for c in first_counts],
        first_touch_samples=samples,
        first_touch_counts=first_counts,
    )
