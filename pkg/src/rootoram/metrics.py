"""Statistical privacy metrics over finite distributions and channels.

Values are in nats unless ``bits=True``.  A *channel* maps each input to a
dict ``{output: probability}``.
"""

from __future__ import annotations

import csv
import math
from typing import Iterable, Mapping, Sequence, TextIO, Union

from rootoram.core import ParameterError

Masses = Union[Mapping, Sequence[float]]

_NORM_TOL = 1e-12


class InfiniteDivergence(ArithmeticError):
    """P puts mass where Q has none."""


def _masses(P: Masses) -> list[float]:
    values = list(P.values()) if isinstance(P, Mapping) else list(P)
    return [float(v) for v in values]


def check_distribution(P: Masses, tol: float = _NORM_TOL) -> list[float]:
    values = _masses(P)
    if not values:
        raise ParameterError("empty distribution")
    if any(v < 0 for v in values):
        raise ParameterError("negative probability mass")
    total = math.fsum(values)
    if abs(total - 1) > tol:
        raise ParameterError(f"masses sum to {total!r}, not 1")
    return values


def _scale(value: float, bits: bool) -> float:
    return value / math.log(2) if bits else value


def shannon_entropy(P: Masses, bits: bool = False) -> float:
    values = check_distribution(P)
    return _scale(-math.fsum(v * math.log(v) for v in values if v > 0), bits)


def min_entropy(P: Masses, bits: bool = False) -> float:
    return _scale(-math.log(max(check_distribution(P))), bits)


def kl_divergence(P: Masses, Q: Masses, bits: bool = False) -> float:
    """``sum P log(P/Q)``, with ``0 log(0/q) = 0``.

    Mappings are aligned by key (missing keys count as zero mass); sequences
    by position.
    """
    if isinstance(P, Mapping) or isinstance(Q, Mapping):
        if not (isinstance(P, Mapping) and isinstance(Q, Mapping)):
            raise ParameterError("P and Q must both be mappings or both sequences")
        keys = list(dict.fromkeys([*P, *Q]))
        p = [float(P.get(key, 0)) for key in keys]
        q = [float(Q.get(key, 0)) for key in keys]
    else:
        p, q = _masses(P), _masses(Q)
        if len(p) != len(q):
            raise ParameterError("P and Q have different supports")
    check_distribution(p)
    check_distribution(q)
    terms = []
    for pi, qi in zip(p, q):
        if pi == 0:
            continue
        if qi == 0:
            raise InfiniteDivergence("P(i) > 0 where Q(i) = 0")
        terms.append(pi * math.log(pi / qi))
    return _scale(max(0.0, math.fsum(terms)), bits)


def uniform(n: int) -> list[float]:
    return [1 / n] * n


def potential_inputs(channel: Mapping) -> dict:
    """For each output, the inputs that produce it with positive probability."""
    out: dict = {}
    for x, dist in channel.items():
        for y, mass in dist.items():
            if mass > 0:
                out.setdefault(y, set()).add(x)
    return out


def k_anonymity(channel: Mapping) -> int:
    """Size of the smallest set of inputs consistent with some output."""
    if not channel:
        raise ParameterError("empty channel")
    sets = potential_inputs(channel)
    if not sets:
        raise ParameterError("channel assigns no positive mass")
    return min(len(s) for s in sets.values())


def read_distribution_csv(fh: TextIO) -> dict:
    """Rows ``outcome,mass``; a non-numeric first row is taken as a header."""
    dist: dict = {}
    for row in _rows(fh, 2):
        dist[row[0]] = dist.get(row[0], 0.0) + float(row[1])
    return dist


def read_channel_csv(fh: TextIO) -> dict:
    """Rows ``input,output,mass``."""
    channel: dict = {}
    for row in _rows(fh, 3):
        channel.setdefault(row[0], {})[row[1]] = float(row[2])
    return channel


def _rows(fh: TextIO, width: int) -> Iterable[list[str]]:
    for n, row in enumerate(csv.reader(fh)):
        if not row or row[0].startswith("#"):
            continue
        if len(row) != width:
            raise ParameterError(f"expected {width} columns, got {len(row)}: {row}")
        try:
            float(row[-1])
        except ValueError:
            if n == 0:
                continue
            raise ParameterError(f"bad mass {row[-1]!r}") from None
        yield [c.strip() for c in row]
