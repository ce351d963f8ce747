"""Horizontally partitioned relations of (key, payload) uint64 tuples, plus generators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def mix64(values, seed: int = 0) -> np.ndarray:
    """Seeded splitmix64 finalizer; a bijection on uint64 for every seed."""
    offset = np.uint64((seed * int(_GOLDEN)) & 0xFFFFFFFFFFFFFFFF)
    z = np.asarray(values, dtype=np.uint64) + offset
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def partition_of(keys: np.ndarray, parts: int, seed: int = 0) -> np.ndarray:
    return (mix64(keys, seed) % np.uint64(parts)).astype(np.int64)


TUPLE_DTYPE = np.dtype([("key", "<u8"), ("payload", "<u8")])
KEY_DTYPE = np.dtype("<u8")


@dataclass
class Relation:
    """Per-node ``(keys, payloads)`` partitions.  Key-only relations have width 8."""

    keys: list[np.ndarray]
    payloads: list[np.ndarray]
    key_only: bool = False
    name: str = "R"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.keys) != len(self.payloads):
            raise ValueError("keys and payloads need one entry per node")
        self.keys = [np.ascontiguousarray(k, dtype=np.uint64) for k in self.keys]
        self.payloads = [np.ascontiguousarray(p, dtype=np.uint64) for p in self.payloads]
        for k, p in zip(self.keys, self.payloads):
            if k.shape != p.shape:
                raise ValueError("partition keys and payloads differ in length")

    @property
    def width(self) -> int:
        return 8 if self.key_only else 16

    @property
    def nodes(self) -> int:
        return len(self.keys)

    def __len__(self) -> int:
        return sum(len(k) for k in self.keys)

    @property
    def all_keys(self) -> np.ndarray:
        return np.concatenate(self.keys) if self.keys else np.empty(0, np.uint64)

    @property
    def all_payloads(self) -> np.ndarray:
        return np.concatenate(self.payloads) if self.payloads else np.empty(0, np.uint64)

    @classmethod
    def from_arrays(cls, keys, payloads=None, nodes: int = 1, name: str = "R",
                    rng: np.random.Generator | None = None) -> "Relation":
        """Split flat arrays into ``nodes`` partitions (random assignment if ``rng`` given)."""
        keys = np.asarray(keys, dtype=np.uint64)
        key_only = payloads is None
        payloads = keys.copy() if key_only else np.asarray(payloads, dtype=np.uint64)
        if rng is None:
            owner = np.arange(len(keys)) % nodes
        else:
            owner = rng.integers(0, nodes, size=len(keys))
        ks = [keys[owner == n] for n in range(nodes)]
        ps = [payloads[owner == n] for n in range(nodes)]
        return cls(ks, ps, key_only=key_only, name=name)

    def encode(self, node: int, mask=None) -> bytes:
        k, p = self.keys[node], self.payloads[node]
        if mask is not None:
            k, p = k[mask], p[mask]
        return encode_tuples(k, p, self.key_only)


def encode_tuples(keys: np.ndarray, payloads: np.ndarray, key_only: bool) -> bytes:
    if key_only:
        return keys.astype(KEY_DTYPE, copy=False).tobytes()
    out = np.empty(len(keys), dtype=TUPLE_DTYPE)
    out["key"], out["payload"] = keys, payloads
    return out.tobytes()


def decode_tuples(data: bytes, key_only: bool) -> tuple[np.ndarray, np.ndarray]:
    if key_only:
        keys = np.frombuffer(data, dtype=KEY_DTYPE).astype(np.uint64)
        return keys, keys.copy()
    arr = np.frombuffer(data, dtype=TUPLE_DTYPE)
    return arr["key"].astype(np.uint64), arr["payload"].astype(np.uint64)


def gen_join_pair(n_r: int, n_s: int, selectivity: float, nodes: int = 1, seed: int = 0,
                  key_only: bool = False) -> tuple[Relation, Relation]:
    """Two relations of unique keys in which a ``selectivity`` fraction of each side has a partner.

    The shared key set has ``round(selectivity * min(n_r, n_s))`` keys.  Payloads
    are row ids so every output pair is distinguishable.
    """
    if not 0.0 <= selectivity <= 1.0:
        raise ValueError("selectivity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    shared = int(round(selectivity * min(n_r, n_s)))
    # distinct pseudo-random keys: a bijective mix of distinct counters
    pool = mix64(np.arange(shared + (n_r - shared) + (n_s - shared), dtype=np.uint64), seed)
    common = pool[:shared]
    r_only = pool[shared:n_r]
    s_only = pool[n_r:n_r + n_s - shared]
    r_keys = rng.permutation(np.concatenate([common, r_only]))
    s_keys = rng.permutation(np.concatenate([common, s_only]))
    R = Relation.from_arrays(r_keys, None if key_only else np.arange(n_r, dtype=np.uint64),
                             nodes, "R", rng)
    S = Relation.from_arrays(s_keys, None if key_only else np.arange(n_s, dtype=np.uint64),
                             nodes, "S", rng)
    R.meta = S.meta = {"seed": seed, "selectivity": selectivity, "n_r": n_r, "n_s": n_s}
    return R, S


def gen_random_pair(n_r: int, n_s: int, domain: int, nodes: int = 1, seed: int = 0,
                    key_only: bool = False) -> tuple[Relation, Relation]:
    """Keys drawn uniformly from ``[0, domain)``; duplicates on both sides are expected."""
    rng = np.random.default_rng(seed)
    r = rng.integers(0, domain, size=n_r, dtype=np.uint64)
    s = rng.integers(0, domain, size=n_s, dtype=np.uint64)
    R = Relation.from_arrays(r, None if key_only else np.arange(n_r, dtype=np.uint64), nodes, "R", rng)
    S = Relation.from_arrays(s, None if key_only else np.arange(n_s, dtype=np.uint64), nodes, "S", rng)
    return R, S


def gen_agg_input(rows: int, distinct: int, nodes: int = 1, seed: int = 0) -> Relation:
    """Uniform group keys over ``distinct`` values; payloads are the aggregated values."""
    if distinct < 1:
        raise ValueError("need at least one group key")
    rng = np.random.default_rng(seed)
    groups = mix64(np.arange(distinct, dtype=np.uint64), seed + 1)
    keys = groups[rng.integers(0, distinct, size=rows)]
    values = rng.integers(0, 1000, size=rows, dtype=np.uint64)
    rel = Relation.from_arrays(keys, values, nodes, "A", rng)
    rel.meta = {"seed": seed, "distinct": distinct, "rows": rows}
    return rel
