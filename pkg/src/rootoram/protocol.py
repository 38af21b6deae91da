"""The trusted client: position map, stash and the access state machine.

One access moves exactly one path in each direction: the whole path to the
block's current leaf ``x`` is read into the stash, blocks are pushed as deep as
they can go along that path, the block is remapped (kept on ``x`` with
probability ``1 - p``, else moved to a uniformly chosen other leaf ``z``) and
written to the deepest free bucket shared by ``P(x)`` and ``P(z)``.  Whatever
does not fit stays in the stash.

Real accesses are interleaved with fake ones: each cycle serves
``Poisson(lam)`` real requests and then one fake access on a random stash
block.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
import random
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from itertools import islice
from typing import Iterable, Optional

from rootoram.core import INFINITE, Params, ParameterError, path_indices
from rootoram.storage import Block, Cipher, MemoryBackend, NullCipher, StorageBackend

log = logging.getLogger(__name__)


class InvariantViolation(RuntimeError):
    """The client found its own bookkeeping inconsistent with the tree."""


class Op(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class AccessRequest:
    op: Op
    addr: int
    data: Optional[bytes] = None

    def __post_init__(self):
        if (self.op is Op.WRITE) != (self.data is not None):
            raise ParameterError("data must be given for WRITE and only for WRITE")

    @classmethod
    def read(cls, addr: int) -> "AccessRequest":
        return cls(Op.READ, addr)

    @classmethod
    def write(cls, addr: int, data: bytes) -> "AccessRequest":
        return cls(Op.WRITE, addr, data)


@dataclass
class AccessTrace:
    """Leaves requested from the server, in order, with the client-side fake flag."""

    entries: list = field(default_factory=list)

    def append(self, leaf: int, is_fake: bool) -> None:
        self.entries.append((leaf, is_fake))

    def server_view(self) -> list[int]:
        return [leaf for leaf, _ in self.entries]

    @property
    def fake_count(self) -> int:
        return sum(1 for _, fake in self.entries if fake)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, AccessTrace) and self.entries == other.entries


@dataclass
class ClientStats:
    real_accesses: int = 0
    fake_accesses: int = 0
    blocks_transferred: int = 0
    max_stash: int = 0
    warmup_accesses: int = 0
    warmup_blocks: int = 0

    def reset(self) -> None:
        self.real_accesses = self.fake_accesses = self.blocks_transferred = self.max_stash = 0

    def blocks_per_real_access(self) -> float:
        if not self.real_accesses:
            return math.nan
        return self.blocks_transferred / self.real_accesses


def poisson(rng: random.Random, lam: float) -> int:
    """Inverse-transform Poisson sample."""
    u = rng.random()
    k = 0
    prob = math.exp(-lam)
    cdf = prob
    while u > cdf:
        k += 1
        prob *= lam / k
        cdf += prob
        if prob == 0.0:  # cdf has stopped growing; u sits in float round-off
            break
    return k


class ORAMClient:
    """Client state for one ORAM instance.

    Build with :meth:`setup`, which formats the store and drains the initial
    stash.  The constructor alone only draws the initial position map.
    """

    def __init__(
        self,
        params: Params,
        store: StorageBackend,
        seed: int = 0,
        cipher: Optional[Cipher] = None,
        record_elements: bool = False,
    ):
        self.params = params
        self.store = store
        self.cipher = cipher if cipher is not None else NullCipher()
        self.rng = random.Random(seed)
        N = params.N
        self.position = [self.rng.randrange(N) for _ in range(N)]
        self.stash: dict[int, bytes] = {}
        # stash ids grouped by the bottom internal node above their leaf
        self._groups: dict[int, list[int]] = {}  # each list sorted
        for a in range(N):
            self._stash_put(a, bytes(params.B))
        self.trace = AccessTrace()
        self.stats = ClientStats()
        self.element_log: Optional[list] = [] if record_elements else None
        self._p = float(params.p)
        self._cycle_left: Optional[int] = None
        self._warming = False
        self._pending: Optional[list] = None
        self._placed: Optional[list] = None
        self._fetched: list = []

    @classmethod
    def setup(
        cls,
        params: Params,
        store: Optional[StorageBackend] = None,
        seed: int = 0,
        cipher: Optional[Cipher] = None,
        warm_up: bool = True,
        record_elements: bool = False,
    ) -> "ORAMClient":
        cipher = cipher if cipher is not None else NullCipher()
        if store is None:
            store = MemoryBackend.for_cipher(params, cipher)
        client = cls(params, store, seed=seed, cipher=cipher, record_elements=record_elements)
        client.format_store()
        if warm_up:
            client.warm_up()
        return client

    # -- setup -------------------------------------------------------------

    def format_store(self) -> None:
        dummy = Block.dummy(self.params.B)
        self.store.format(lambda: self.cipher.seal(dummy))

    def warm_up(self, passes: Optional[int] = None) -> None:
        """Drain the initial stash with one fake access per block."""
        self._warming = True
        try:
            for _ in range(self.params.N if passes is None else passes):
                self.fake_access()
        finally:
            self._warming = False

    # -- public access loop --------------------------------------------------

    def access(self, requests: Iterable[AccessRequest]) -> tuple[list[bytes], AccessTrace]:
        """Serve ``requests`` with fake accesses interleaved at rate ``lam``.

        Returns the payload each request saw before it was applied and the
        trace entries produced during this call.  The Poisson cycle carries over
        between calls.

        If an access fails, the error propagates with a ``completed`` attribute
        listing the payloads of the requests already applied.  A fake access
        that failed is retried first on the next call.
        """
        start = len(self.trace)
        out: list[bytes] = []
        try:
            self._serve(requests, out)
        except Exception as exc:
            exc.completed = out
            raise
        return out, AccessTrace(self.trace.entries[start:])

    def _serve(self, requests: Iterable[AccessRequest], out: list) -> None:
        lam = self.params.lam
        for req in requests:
            if lam is INFINITE:
                out.append(self.normal_access(req.addr, req.op, req.data))
                continue
            while True:
                if self._cycle_left is None:
                    self._cycle_left = poisson(self.rng, lam)
                if self._cycle_left:
                    break
                self.fake_access()
                self._cycle_left = None
            out.append(self.normal_access(req.addr, req.op, req.data))
            self._cycle_left -= 1
            if self._cycle_left == 0:
                self.fake_access()
                self._cycle_left = None

    def read(self, addr: int) -> bytes:
        return self.access([AccessRequest.read(addr)])[0][0]

    def write(self, addr: int, data: bytes) -> bytes:
        return self.access([AccessRequest.write(addr, data)])[0][0]

    # -- one access ----------------------------------------------------------

    def normal_access(self, a: int, op: Op = Op.READ, data: Optional[bytes] = None,
                      is_fake: bool = False) -> bytes:
        if not 0 <= a < self.params.N:
            raise ParameterError(f"address {a} outside [0, {self.params.N})")
        if data is not None and len(data) != self.params.B:
            raise ParameterError(f"payload must be {self.params.B} bytes, got {len(data)}")
        payload, x = self.read_blocks(a)
        try:
            self.push_down(x, exclude=a)
            z = self.update_mapping(a)
            new_payload = data if op is Op.WRITE else payload
            self.write_back(a, x, z, new_payload)
        except BaseException:
            # the server still holds the old path, so undo the local side
            self._rollback(a, x, payload)
            raise
        self.trace.append(x, is_fake)
        if self.element_log is not None:
            self.element_log.append((a, x, is_fake))
        if self._warming:
            self.stats.warmup_accesses += 1
        else:
            if is_fake:
                self.stats.fake_accesses += 1
            else:
                self.stats.real_accesses += 1
            if len(self.stash) > self.stats.max_stash:
                self.stats.max_stash = len(self.stash)
        return payload

    def fake_access(self) -> None:
        """Access a random stash block, or a random block if the stash is empty."""
        if self.stash:
            a = self.rng.choice(list(self.stash))
        else:
            a = self.rng.randrange(self.params.N)
        self.normal_access(a, is_fake=True)

    def read_blocks(self, a: int) -> tuple[bytes, int]:
        """Fetch ``P(position[a])`` into the stash and pull out ``a``'s payload."""
        x = self.position[a]
        buckets = self.store.read_path(x)
        opened = self.cipher.open
        stash = self.stash
        n = 0
        fetched = []
        for bucket in buckets:
            for env in bucket:
                n += 1
                block_id, payload = opened(env)
                if block_id is not None:
                    if block_id in stash:
                        for b in fetched:
                            self._stash_pop(b)
                        raise InvariantViolation(f"block {block_id} both in tree and stash")
                    self._stash_put(block_id, payload)
                    fetched.append(block_id)
        self._fetched = fetched
        self._placed = None
        self._count(n)
        try:
            payload = self._stash_pop(a)
        except KeyError:
            raise InvariantViolation(f"block {a} not on path {x} nor in stash") from None
        return payload, x

    def push_down(self, x: int, exclude: Optional[int] = None) -> list[list[tuple[int, bytes]]]:
        """Greedily place stash blocks as deep as possible on ``P(x)``.

        Blocks whose deepest reachable level is lower go first; ties go to the
        smaller block id.  Placed blocks leave the stash; the placement is kept
        for :meth:`write_back` and also returned.
        """
        p = self.params
        k, Z, shift = p.k, p.Z, p.leaf_shift
        px = x >> shift
        position = self.position
        groups = self._groups
        keys_at: list[list[int]] = [[] for _ in range(k)]
        for g in groups:
            if g != px:
                keys_at[k - 1 - (g ^ px).bit_length()].append(g)
        own = groups.get(px, ())
        levels: list[list[tuple[int, bytes]]] = [[] for _ in range(k + 1)]
        free_above = Z * (k + 1)  # free slots in levels 0..depth
        for depth in range(k, -1, -1):
            if depth == k:
                ids = [b for b in own if position[b] == x and b != exclude]
            elif depth == k - 1:
                mine = [b for b in own if position[b] != x and b != exclude]
                ids = list(islice(heapq.merge(mine, *(groups[g] for g in keys_at[depth])),
                                  free_above))
            else:
                ids = list(islice(heapq.merge(*(groups[g] for g in keys_at[depth])), free_above))
            for b in ids:
                for lvl in range(depth, -1, -1):
                    if len(levels[lvl]) < Z:
                        levels[lvl].append((b, self._stash_pop(b)))
                        break
                else:
                    break
            free_above -= Z - len(levels[depth])
            if not free_above:
                break
        self._pending = levels
        return levels

    def _stash_put(self, b: int, payload: bytes) -> None:
        self.stash[b] = payload
        g = self.position[b] >> self.params.leaf_shift
        members = self._groups.get(g)
        if members is None:
            self._groups[g] = [b]
        else:
            insort(members, b)

    def _stash_pop(self, b: int) -> bytes:
        payload = self.stash.pop(b)
        g = self.position[b] >> self.params.leaf_shift
        members = self._groups[g]
        del members[bisect_left(members, b)]
        if not members:
            del self._groups[g]
        return payload

    def update_mapping(self, a: int) -> int:
        x = self.position[a]
        if self.rng.random() < self._p:
            z = self.rng.randrange(self.params.N - 1)
            if z >= x:
                z += 1
        else:
            z = x
        self.position[a] = z
        return z

    def write_back(self, a: int, x: int, z: int, payload: bytes) -> None:
        p = self.params
        levels = self._pending if self._pending is not None else [[] for _ in range(p.k + 1)]
        self._pending = None
        if x == z:
            depth = p.k
        else:
            depth = p.k - 1 - ((x >> p.leaf_shift) ^ (z >> p.leaf_shift)).bit_length()
        for lvl in range(depth, -1, -1):
            if len(levels[lvl]) < p.Z:
                levels[lvl].append((a, payload))
                break
        else:
            self._stash_put(a, payload)
        seal = self.cipher.seal
        dummy = Block.dummy(p.B)
        buckets = []
        for placed in levels:
            bucket = [seal(Block(b, data)) for b, data in placed]
            bucket.extend(seal(dummy) for _ in range(p.Z - len(placed)))
            buckets.append(bucket)
        self._placed = levels
        self.store.write_path(x, buckets)
        self._count(p.Z * (p.k + 1))

    def _rollback(self, a: int, x: int, payload: bytes) -> None:
        fetched = set(self._fetched)
        levels = self._placed if self._placed is not None else (self._pending or [])
        self._pending = self._placed = None
        if a in self.stash:
            self._stash_pop(a)
        self.position[a] = x
        for placed in levels:
            for b, data in placed:
                if b != a and b not in fetched:
                    self._stash_put(b, data)
        for b in fetched:
            if b in self.stash:
                self._stash_pop(b)
        if a not in fetched:
            self._stash_put(a, payload)

    def _count(self, n: int) -> None:
        if self._warming:
            self.stats.warmup_blocks += n
        else:
            self.stats.blocks_transferred += n

    # -- auditing ------------------------------------------------------------

    def tree_contents(self) -> dict[int, tuple[int, bytes]]:
        """Map block id -> (bucket index, payload) for every real block in the tree.

        Raises :class:`InvariantViolation` if a block id occurs twice.
        """
        p = self.params
        found: dict[int, tuple[int, bytes]] = {}
        if isinstance(self.store, MemoryBackend):
            indexed = enumerate(self.store.buckets)
        else:
            indexed = self._remote_buckets()
        for index, bucket in indexed:
            if bucket is None:
                continue
            if len(bucket) > p.Z:
                raise InvariantViolation(f"bucket {index} holds {len(bucket)} > Z slots")
            for env in bucket:
                block_id, payload = self.cipher.open(env)
                if block_id is None:
                    continue
                if block_id in found:
                    raise InvariantViolation(f"block {block_id} stored twice")
                found[block_id] = (index, payload)
        return found

    def _remote_buckets(self):
        seen = set()
        for leaf in range(self.params.N):
            for index, bucket in zip(path_indices(self.params, leaf), self.store.read_path(leaf)):
                if index not in seen:
                    seen.add(index)
                    yield index, bucket

    def audit(self) -> list[str]:
        """Check the main invariant and block conservation; return violations."""
        problems = []
        try:
            tree = self.tree_contents()
        except InvariantViolation as exc:
            return [str(exc)]
        for a, (index, _) in tree.items():
            if a in self.stash:
                problems.append(f"block {a} in both tree and stash")
            if index not in path_indices(self.params, self.position[a]):
                problems.append(f"block {a} at bucket {index}, off path {self.position[a]}")
        ids = set(tree) | set(self.stash)
        if len(tree) + len(self.stash) != self.params.N or ids != set(range(self.params.N)):
            problems.append(
                f"conservation: {len(tree)} in tree + {len(self.stash)} in stash, "
                f"{self.params.N - len(ids)} ids missing"
            )
        return problems

    def check_invariants(self) -> None:
        problems = self.audit()
        if problems:
            raise InvariantViolation("; ".join(problems[:5]))

    def logical_contents(self) -> dict[int, bytes]:
        """Current payload of every block, from tree and stash (audit helper)."""
        out = {a: data for a, (_, data) in self.tree_contents().items()}
        out.update(self.stash)
        return out

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict:
        key = getattr(self.cipher, "key", None)
        version, internal, gauss = self.rng.getstate()
        return {
            "params": {"L": self.params.L, "k": self.params.k, "p": str(self.params.p),
                       "Z": self.params.Z, "B": self.params.B, "lam": str(self.params.lam)},
            "position": list(self.position),
            "stash": {str(a): data.hex() for a, data in self.stash.items()},
            "key": key.hex() if key is not None else None,
            "rng": [version, list(internal), gauss],
            "cycle_left": self._cycle_left,
        }

    @classmethod
    def from_state(cls, state: dict, store: StorageBackend) -> "ORAMClient":
        from rootoram.core import parse_probability
        from rootoram.storage import AesGcmCipher

        raw = state["params"]
        params = Params(L=raw["L"], k=raw["k"], p=parse_probability(raw["p"]),
                        Z=raw["Z"], B=raw["B"], lam=raw["lam"])
        cipher = AesGcmCipher(bytes.fromhex(state["key"])) if state["key"] else NullCipher()
        client = cls(params, store, cipher=cipher)
        client.position = list(state["position"])
        client.stash, client._groups = {}, {}
        for a, data in state["stash"].items():
            client._stash_put(int(a), bytes.fromhex(data))
        version, internal, gauss = state["rng"]
        client.rng.setstate((version, tuple(internal), gauss))
        client._cycle_left = state.get("cycle_left")
        return client
