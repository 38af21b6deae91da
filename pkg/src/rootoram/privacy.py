"""Closed-form privacy and bandwidth accounting.

All logarithms are natural, so ``epsilon`` is on the same scale as the
``exp(epsilon)`` factor in the (epsilon, delta) guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

from rootoram.core import INFINITE, ParameterError, Rate, parse_rate

Number = Union[float, Fraction]


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 <= self.delta <= 1:
            raise ParameterError(f"delta must be in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class CapacityModel:
    """Blocks that fit along one path plus the stash, and the overflow count."""

    C: int
    Z: int
    k: int

    @property
    def capacity(self) -> int:
        return self.Z * (self.k + 1) + self.C

    @property
    def M_k(self) -> int:
        return self.capacity + 1


def _check_p(N: int, p: Number) -> None:
    if N < 2:
        raise ParameterError(f"N must be >= 2, got {N}")
    upper = 1 - Fraction(1, N)
    slack = 0 if isinstance(p, Fraction) else 1e-12
    if not 0 < p <= upper + slack:
        raise ParameterError(f"p must lie in (0, {float(upper)}], got {p}")


def epsilon_of(N: int, p: Number) -> float:
    _check_p(N, p)
    if isinstance(p, Fraction):
        return max(0.0, 2 * math.log((N - 1) * (1 - p) / p))
    # log1p keeps 1 - p accurate when p is tiny
    value = 2 * (math.log(N - 1) + math.log1p(-p) - math.log(p))
    return max(0.0, value)


def delta_of(p: Number, C: int, Z: int, k: int) -> float:
    if not 0 < p < 1:
        raise ParameterError(f"p must lie in (0, 1), got {p}")
    if C < 0 or Z < 1 or k < 1:
        raise ParameterError("need C >= 0, Z >= 1, k >= 1")
    return float((1 - p) ** CapacityModel(C, Z, k).M_k)


def bandwidth_of(Z: int, k: int, lam: Rate = INFINITE) -> float:
    """Expected blocks moved per real access."""
    lam = parse_rate(lam)
    per_path = 2 * Z * (k + 1)
    if lam is INFINITE:
        return float(per_path)
    return per_path * (1 + 1 / lam)


def theorem_spec(N: int, p: Number, C: int, Z: int, k: int) -> PrivacySpec:
    return PrivacySpec(epsilon_of(N, p), delta_of(p, C, Z, k))


def compose(m: int, spec: PrivacySpec) -> PrivacySpec:
    """Guarantee for inputs that differ in ``m`` accesses."""
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    return PrivacySpec(m * spec.epsilon, min(1.0, m * spec.delta))


@dataclass(frozen=True)
class RecursionPlan:
    t: int
    spec: PrivacySpec
    bandwidth: float
    outsourcing_ratio: float


def recursion_plan(t: int, spec: PrivacySpec, bandwidth: float, R: float) -> RecursionPlan:
    """Cost of ``t`` nested levels: privacy and bandwidth add up, ``R`` multiplies."""
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    if not R > 1:
        raise ParameterError(f"R must exceed 1, got {R}")
    return RecursionPlan(t, compose(t, spec), t * bandwidth, R ** t)


def solve_p_for_epsilon(N: int, target_eps: float) -> float:
    if target_eps < 0:
        raise ParameterError(f"target epsilon must be >= 0, got {target_eps}")
    if N < 2:
        raise ParameterError(f"N must be >= 2, got {N}")
    return (N - 1) / (math.exp(target_eps / 2) + N - 1)


def solve_k_for_bandwidth(budget: float, Z: int, lam: Rate = INFINITE) -> int:
    """Largest ``k`` whose bandwidth fits ``budget`` blocks per real access."""
    lam = parse_rate(lam)
    factor = 1.0 if lam is INFINITE else 1 + 1 / lam
    k = math.floor(budget / (2 * Z * factor)) - 1
    if k < 1:
        raise ParameterError(f"bandwidth budget {budget} is below the k=1 cost {bandwidth_of(Z, 1, lam)}")
    return k


class BudgetExhausted(ParameterError):
    def __init__(self, remaining_epsilon: float, remaining_delta: float, requested: PrivacySpec):
        self.remaining_epsilon = remaining_epsilon
        self.remaining_delta = remaining_delta
        self.requested = requested
        super().__init__(
            f"query needs epsilon={requested.epsilon:g}, only {remaining_epsilon:g} left"
        )


class BudgetTracker:
    """Admit queries until their summed epsilon would pass ``eps_budget``."""

    def __init__(self, eps_budget: float, delta_budget: float = 1.0):
        if eps_budget < 0:
            raise ParameterError(f"budget must be >= 0, got {eps_budget}")
        self.eps_budget = eps_budget
        self.delta_budget = delta_budget
        self.spent_epsilon = 0.0
        self.spent_delta = 0.0
        self.admitted = 0

    @property
    def remaining(self) -> PrivacySpec:
        return PrivacySpec(max(0.0, self.eps_budget - self.spent_epsilon),
                           max(0.0, self.delta_budget - self.spent_delta))

    def would_admit(self, spec: PrivacySpec) -> bool:
        if self.eps_budget == 0:
            return False
        # relative slack so that five 0.2 queries fill a budget of 1.0
        slack = 1e-12 * max(1.0, self.eps_budget)
        return (self.spent_epsilon + spec.epsilon <= self.eps_budget + slack
                and self.spent_delta + spec.delta <= self.delta_budget + 1e-15)

    def spend(self, spec: PrivacySpec) -> None:
        if not self.would_admit(spec):
            rem = self.remaining
            raise BudgetExhausted(rem.epsilon, rem.delta, spec)
        self.spent_epsilon += spec.epsilon
        self.spent_delta += spec.delta
        self.admitted += 1
