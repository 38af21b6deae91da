"""Desk-scale stash and bandwidth simulations, emitted as CSV rows."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from rootoram.core import INFINITE, Params, ParameterError, parse_rate
from rootoram.privacy import bandwidth_of, delta_of, epsilon_of, recursion_plan, theorem_spec
from rootoram.protocol import AccessRequest, InvariantViolation, ORAMClient

log = logging.getLogger(__name__)

SAMPLE_EVERY = 64
AUDIT_EVERY = 1000

SWEEP_COLUMNS = ["L", "k", "Z", "p", "lambda", "M", "seed", "max_stash", "R",
                 "epsilon", "delta", "bandwidth", "posmap_bytes", "warmup_accesses",
                 "warmup_blocks"]
MGROWTH_COLUMNS = ["L", "k", "Z", "p", "lambda", "seed", "M", "max_stash"]


def p_from_index(i: int) -> float:
    """``1 - 2**-i``, the remap-probability family used by the sweeps."""
    if i < 1:
        raise ParameterError(f"p index must be >= 1, got {i}")
    return 1 - 2.0 ** -i


@dataclass
class SweepGrid:
    L: list[int]
    k: list[int]
    Z: list[int]
    p_i: list[int]
    lam: list = field(default_factory=lambda: [INFINITE])
    M: list[int] = field(default_factory=lambda: [1024])
    seeds: list[int] = field(default_factory=lambda: [0])
    B: int = 16

    def __post_init__(self):
        self.lam = [parse_rate(v) for v in self.lam]
        for M in self.M:
            if M < 1:
                raise ParameterError(f"M must be >= 1, got {M}")
        # validate every cell up front so a bad grid fails before any work
        for _ in self.cells():
            pass

    @classmethod
    def from_json(cls, doc) -> "SweepGrid":
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        known = {"L", "k", "Z", "p_i", "lambda", "M", "seeds", "B"}
        extra = set(doc) - known
        if extra:
            raise ParameterError(f"unknown grid keys: {sorted(extra)}")
        kwargs = {key: doc[key] for key in known - {"lambda", "B"} if key in doc}
        if "lambda" in doc:
            kwargs["lam"] = doc["lambda"]
        if "B" in doc:
            kwargs["B"] = doc["B"]
        return cls(**kwargs)

    def cells(self) -> Iterable[tuple[Params, int, int]]:
        """Yield ``(params, M, seed)``; cells with ``k > L`` are skipped."""
        for L, k, Z, i, lam in itertools.product(self.L, self.k, self.Z, self.p_i, self.lam):
            if k > L:
                continue
            p = min(p_from_index(i), 1 - 1 / (1 << L))
            params = Params(L=L, k=k, p=p, Z=Z, B=self.B, lam=lam)
            for M in self.M:
                for seed in self.seeds:
                    yield params, M, seed


@dataclass
class StashStats:
    max_stash: int
    series: list[int]
    blocks_transferred: int
    real_accesses: int
    fake_accesses: int
    wall_time: float
    warmup_accesses: int
    warmup_blocks: int
    checkpoints: dict[int, int] = field(default_factory=dict)

    @property
    def blocks_per_access(self) -> float:
        return self.blocks_transferred / self.real_accesses if self.real_accesses else 0.0

    def deterministic(self) -> tuple:
        """Everything except wall time."""
        return (self.max_stash, tuple(self.series), self.blocks_transferred,
                self.real_accesses, self.fake_accesses, self.warmup_accesses,
                self.warmup_blocks, tuple(sorted(self.checkpoints.items())))


def run_sim(params: Params, M: int, seed: int = 0, *, audit_every: Optional[int] = None,
            checkpoints: Sequence[int] = (), sample_every: int = SAMPLE_EVERY) -> StashStats:
    """Drive ``M`` uniformly random reads through a fresh client.

    ``checkpoints`` records the running max stash after that many real
    accesses.  With ``audit_every`` set, the full tree is audited at that
    interval and a violation raises :class:`InvariantViolation`.
    """
    if M < 1:
        raise ParameterError(f"M must be >= 1, got {M}")
    t0 = time.perf_counter()
    client = ORAMClient.setup(params, seed=seed)
    client.stats.reset()
    addr_rng = random.Random(f"addr-{seed}")
    N = params.N
    marks = sorted(m for m in set(checkpoints) if 1 <= m <= M)
    reached: dict[int, int] = {}
    series = []
    done = 0
    while done < M:
        # stop at the next sample point, audit point, checkpoint or the end
        stop = min(M, (done // sample_every + 1) * sample_every)
        if audit_every:
            stop = min(stop, (done // audit_every + 1) * audit_every)
        stop = min([stop] + [m for m in marks if m > done])
        client.access([AccessRequest.read(addr_rng.randrange(N)) for _ in range(stop - done)])
        done = stop
        if done % sample_every == 0:
            series.append(len(client.stash))
        if audit_every and done % audit_every == 0:
            problems = client.audit()
            if problems:
                raise InvariantViolation(
                    f"audit after {done} accesses ({params}, seed {seed}): {problems[:5]}")
        if done in marks:
            reached[done] = client.stats.max_stash
    st = client.stats
    return StashStats(
        max_stash=st.max_stash,
        series=series,
        blocks_transferred=st.blocks_transferred,
        real_accesses=st.real_accesses,
        fake_accesses=st.fake_accesses,
        wall_time=time.perf_counter() - t0,
        warmup_accesses=st.warmup_accesses,
        warmup_blocks=st.warmup_blocks,
        checkpoints=reached,
    )


def outsourcing_ratio(params: Params, stats: StashStats) -> float:
    """Outsourced blocks over peak stash blocks; ``N`` when the stash never filled."""
    if stats.max_stash == 0:
        return float(params.N)
    return params.N / stats.max_stash


def position_map_bytes(params: Params) -> int:
    return (params.N * params.L + 7) // 8


def recursion_projection(params: Params, stats: StashStats, t: int, C: int = 0):
    spec = theorem_spec(params.N, params.p, C, params.Z, params.k)
    return recursion_plan(t, spec, bandwidth_of(params.Z, params.k, params.lam),
                          outsourcing_ratio(params, stats))


def _lam_text(lam) -> str:
    return "inf" if lam is INFINITE else repr(float(lam))


def sweep_row(params: Params, M: int, seed: int, stats: StashStats, C: int = 0) -> dict:
    return {
        "L": params.L,
        "k": params.k,
        "Z": params.Z,
        "p": repr(float(params.p)),
        "lambda": _lam_text(params.lam),
        "M": M,
        "seed": seed,
        "max_stash": stats.max_stash,
        "R": repr(outsourcing_ratio(params, stats)),
        "epsilon": repr(epsilon_of(params.N, params.p)),
        "delta": repr(delta_of(params.p, C, params.Z, params.k)),
        "bandwidth": repr(bandwidth_of(params.Z, params.k, params.lam)),
        "posmap_bytes": position_map_bytes(params),
        "warmup_accesses": stats.warmup_accesses,
        "warmup_blocks": stats.warmup_blocks,
    }


def sweep(grid: SweepGrid, audit_every: Optional[int] = AUDIT_EVERY) -> list[dict]:
    rows = []
    for params, M, seed in grid.cells():
        stats = run_sim(params, M, seed, audit_every=audit_every)
        rows.append(sweep_row(params, M, seed, stats))
        log.info("cell L=%d k=%d Z=%d M=%d seed=%d max_stash=%d (%.1fs)", params.L,
                 params.k, params.Z, M, seed, stats.max_stash, stats.wall_time)
    return rows


def appendix_params(k: int, L: int = 10, Z: int = 4, lam=1, B: int = 16) -> Params:
    """Stash-growth configuration: ``N = 2**L``, ``lambda = 1``, ``p = 1 - 2**-k``."""
    return Params(L=L, k=k, p=min(p_from_index(k), 1 - 1 / (1 << L)), Z=Z, B=B, lam=lam)


def m_growth(params: Params, Ms: Sequence[int], seed: int = 0,
             audit_every: Optional[int] = None) -> list[dict]:
    """Max stash after each ``M`` in ``Ms``, read off a single run of ``max(Ms)``."""
    Ms = list(Ms)
    if not Ms or any(b <= a for a, b in zip(Ms, Ms[1:])):
        raise ParameterError("M values must be strictly increasing")
    stats = run_sim(params, Ms[-1], seed, checkpoints=Ms, audit_every=audit_every)
    return [
        {"L": params.L, "k": params.k, "Z": params.Z, "p": repr(float(params.p)),
         "lambda": _lam_text(params.lam), "seed": seed, "M": M,
         "max_stash": stats.checkpoints[M]}
        for M in Ms
    ]


def growth_factor(rows: Sequence[dict], lo: int, hi: int) -> float:
    by_m = {r["M"]: r["max_stash"] for r in rows}
    base = by_m[lo]
    if base == 0:
        return 1.0 if by_m[hi] == 0 else float("inf")
    return by_m[hi] / base


def write_csv(rows: Sequence[dict], columns: Sequence[str], out=None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue() if out is None else ""
