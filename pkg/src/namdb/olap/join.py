"""Distributed equi-joins over the simulated fabric.

Every operator returns a :class:`JoinResult` holding the matched
``(key, r_payload, s_payload)`` triples plus a metrics dict.  Compute nodes are
fabric nodes ``0..p-1``; the one-sided variants shuffle into passive storage
nodes ``STORAGE_BASE + d`` and the joining compute node ``d`` reads its
partitions back from there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..fabric import Fabric, RemoteAddress, Transport, Verb, receive
from .bloom import BloomFilter, bloom_parameters
from .relation import Relation, decode_tuples, encode_tuples, mix64, partition_of

STORAGE_BASE = 1000
SHUFFLE_SEED = 0x5A17
RADIX_SEED = 0x7AD1
DEFAULT_CHUNK = 64 * 1024
BUFFER_BYTES = 2 * 1024
L3_BUDGET = 16 * 1024 * 1024
CACHE_BLOCK = 64 * 1024
DEFAULT_SIGNAL_EVERY = 16


@dataclass
class JoinResult:
    keys: np.ndarray
    r_payload: np.ndarray
    s_payload: np.ndarray
    metrics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keys)

    def canonical(self) -> np.ndarray:
        """Rows ``(key, r_payload, s_payload)`` in lexicographic order; equal iff same multiset."""
        order = np.lexsort((self.s_payload, self.r_payload, self.keys))
        return np.stack([self.keys[order], self.r_payload[order], self.s_payload[order]])

    def same_as(self, other: "JoinResult") -> bool:
        return len(self) == len(other) and np.array_equal(self.canonical(), other.canonical())

    @classmethod
    def concat(cls, parts, metrics=None) -> "JoinResult":
        parts = list(parts)
        if not parts:
            e = np.empty(0, np.uint64)
            return cls(e, e.copy(), e.copy(), metrics or {})
        return cls(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                   np.concatenate([p[2] for p in parts]), metrics or {})


# ---------------------------------------------------------------------------
# oracle and local join


def nested_loop_join(R: Relation, S: Relation, chunk_cells: int = 1 << 22) -> JoinResult:
    """Compare every R tuple with every S tuple (in chunks of an equality matrix)."""
    rk, rp = R.all_keys, R.all_payloads
    sk, sp = S.all_keys, S.all_payloads
    width = max(len(sk), 1)
    step = max(1, chunk_cells // width)
    parts = []
    for lo in range(0, len(rk), step):
        hits = np.flatnonzero(np.equal.outer(rk[lo:lo + step], sk))
        ri, si = np.divmod(hits, width)
        parts.append((rk[lo + ri], rp[lo + ri], sp[si]))
    return JoinResult.concat(parts, {"algorithm": "nested_loop"})


def _build_probe(rk, rp, sk, sp):
    """Sorted build on R, binary-search probe with S; returns matched triples."""
    order = np.argsort(rk, kind="stable")
    rk_sorted, rp_sorted = rk[order], rp[order]
    lo = np.searchsorted(rk_sorted, sk, side="left")
    hi = np.searchsorted(rk_sorted, sk, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        e = np.empty(0, np.uint64)
        return e, e.copy(), e.copy()
    s_idx = np.repeat(np.arange(len(sk)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    r_idx = np.repeat(lo, counts) + (np.arange(total) - starts)
    return sk[s_idx], rp_sorted[r_idx], sp[s_idx]


def default_fanout(total_bytes: int, minimum: int = 1, budget: int = L3_BUDGET,
                   buffer_bytes: int = BUFFER_BYTES, block: int = CACHE_BLOCK) -> int:
    """Smallest power of two giving cache-sized blocks, capped by the buffer budget."""
    cap = max(1, budget // buffer_bytes)
    need = max(minimum, -(-total_bytes // block), 1)
    fanout = 1 << (need - 1).bit_length()
    return max(minimum, min(fanout, cap))


def local_radix_join(rk, rp, sk, sp, fanout: int | None = None, width: int = 16):
    """One radix pass into cache-sized blocks, then build/probe each block."""
    rk, rp = np.asarray(rk, np.uint64), np.asarray(rp, np.uint64)
    sk, sp = np.asarray(sk, np.uint64), np.asarray(sp, np.uint64)
    if len(rk) == 0 or len(sk) == 0:
        e = np.empty(0, np.uint64)
        return e, e.copy(), e.copy()
    if fanout is None:
        fanout = default_fanout((len(rk) + len(sk)) * width)
    mask = np.uint64(fanout - 1)
    rb = (mix64(rk, RADIX_SEED) & mask).astype(np.int64)
    sb = (mix64(sk, RADIX_SEED) & mask).astype(np.int64)
    r_order, s_order = np.argsort(rb, kind="stable"), np.argsort(sb, kind="stable")
    r_bounds = np.searchsorted(rb[r_order], np.arange(fanout + 1))
    s_bounds = np.searchsorted(sb[s_order], np.arange(fanout + 1))
    out = []
    for b in range(fanout):
        ri = r_order[r_bounds[b]:r_bounds[b + 1]]
        si = s_order[s_bounds[b]:s_bounds[b + 1]]
        if len(ri) and len(si):
            out.append(_build_probe(rk[ri], rp[ri], sk[si], sp[si]))
    if not out:
        e = np.empty(0, np.uint64)
        return e, e.copy(), e.copy()
    return tuple(np.concatenate([o[i] for o in out]) for i in range(3))


# ---------------------------------------------------------------------------
# helpers


def _check_inputs(R: Relation, S: Relation) -> int:
    if R.nodes != S.nodes:
        raise ValueError("R and S must be partitioned over the same nodes")
    if R.key_only != S.key_only:
        raise ValueError("R and S must share a tuple layout")
    return R.nodes


def _metrics(fabric: Fabric, algorithm: str, **extra) -> dict:
    rows = fabric.metrics.snapshot()
    out = {
        "algorithm": algorithm,
        "bytes_sent": sum(r["bytes_sent"] for r in rows),
        "server_cycles": fabric.metrics.server_cycles(),
        "client_cycles": sum(r["client_cycles"] for r in rows),
    }
    for verb in Verb:
        out[verb.value.lower()] = fabric.metrics.verb_count(verb)
    out.update(extra)
    return out


class _Messaging:
    """Lazily connected two-sided channels between compute nodes."""

    def __init__(self, fabric: Fabric, transport: Transport, chunk_bytes: int):
        self.fabric = fabric
        self.transport = transport
        self.chunk_bytes = chunk_bytes
        self._qps = {}

    def qp(self, src: int, dst: int):
        qp = self._qps.get((src, dst))
        if qp is None:
            qp = self.fabric.connect(src, dst, self.transport, session=f"shuffle{src}")
            self._qps[(src, dst)] = qp
        return qp

    def transfer(self, src: int, dst: int, data: bytes, unit: int = 1) -> bytes:
        """SEND ``data`` in chunks (each a multiple of ``unit`` bytes); return what arrived."""
        qp = self.qp(src, dst)
        step = max(unit, self.chunk_bytes // unit * unit)
        got = []
        for lo in range(0, len(data), step):
            piece = data[lo:lo + step]
            seq = qp.peer.post_receive(len(piece))
            qp.post_send(piece)
            got.append(receive(qp.peer, seq))
        return b"".join(got)


def _two_sided_shuffle(msg: _Messaging, rel: Relation, keep=None):
    """Hash-repartition ``rel`` across its nodes; returns per-node (keys, payloads)."""
    p = rel.nodes
    inbox = [[] for _ in range(p)]
    local_tuples = 0
    for src in range(p):
        keys = rel.keys[src]
        sel = np.ones(len(keys), bool) if keep is None else keep[src]
        dest = partition_of(keys, p, SHUFFLE_SEED)
        for dst in range(p):
            mask = sel & (dest == dst)
            if dst == src:
                inbox[dst].append((keys[mask], rel.payloads[src][mask]))
                local_tuples += int(mask.sum())
                continue
            data = msg.transfer(src, dst, rel.encode(src, mask), rel.width)
            inbox[dst].append(decode_tuples(data, rel.key_only))
    merged = [(np.concatenate([k for k, _ in box]), np.concatenate([v for _, v in box])) for box in inbox]
    return merged, local_tuples


def _join_nodes(r_parts, s_parts, width: int):
    return [local_radix_join(rk, rp, sk, sp, width=width)
            for (rk, rp), (sk, sp) in zip(r_parts, s_parts)]


# ---------------------------------------------------------------------------
# two-sided operators


def ghj(R: Relation, S: Relation, transport=Transport.IPOETH, chunk_bytes: int = DEFAULT_CHUNK,
        fabric: Fabric | None = None) -> JoinResult:
    """Grace hash join: repartition both sides with SEND/RECEIVE, then join locally."""
    _check_inputs(R, S)
    fabric = fabric or Fabric()
    msg = _Messaging(fabric, Transport.parse(transport), chunk_bytes)
    r_parts, r_local = _two_sided_shuffle(msg, R)
    s_parts, s_local = _two_sided_shuffle(msg, S)
    partition = _metrics(fabric, "ghj")
    res = JoinResult.concat(_join_nodes(r_parts, s_parts, R.width))
    res.metrics = _metrics(fabric, "ghj", local_tuples=r_local + s_local,
                           bytes_shuffled=partition["bytes_sent"],
                           partition_server_cycles=partition["server_cycles"])
    return res


def ghj_bloom(R: Relation, S: Relation, epsilon: float = 0.1, transport=Transport.IPOETH,
              chunk_bytes: int = DEFAULT_CHUNK, fabric: Fabric | None = None) -> JoinResult:
    """GHJ with semi-join reduction: drop tuples whose key misses the other side's filter."""
    p = _check_inputs(R, S)
    fabric = fabric or Fabric()
    msg = _Messaging(fabric, Transport.parse(transport), chunk_bytes)

    def global_filter(rel: Relation) -> BloomFilter:
        m, k = bloom_parameters(len(rel), epsilon)
        local = []
        for n in range(p):
            bf = BloomFilter(np.zeros(m, bool), k, epsilon)
            bf.add(rel.keys[n])
            local.append(bf)
        # all-to-all broadcast of the per-node filters; every node ORs what it receives
        merged = None
        for dst in range(p):
            acc = local[dst]
            for src in range(p):
                if src != dst:
                    acc = acc.union(acc.with_bits(msg.transfer(src, dst, local[src].to_bytes())))
            merged = acc
        return merged

    b_r, b_s = global_filter(R), global_filter(S)
    bloom_bytes = fabric.metrics.snapshot()
    bloom_bytes = sum(r["bytes_sent"] for r in bloom_bytes)
    keep_r = [b_s.contains(k) for k in R.keys]
    keep_s = [b_r.contains(k) for k in S.keys]
    kept = sum(int(m.sum()) for m in keep_r) + sum(int(m.sum()) for m in keep_s)
    r_parts, r_local = _two_sided_shuffle(msg, R, keep_r)
    s_parts, s_local = _two_sided_shuffle(msg, S, keep_s)
    partition = _metrics(fabric, "ghj_bloom")
    res = JoinResult.concat(_join_nodes(r_parts, s_parts, R.width))
    total = len(R) + len(S)
    res.metrics = _metrics(fabric, "ghj_bloom", bloom_bytes=bloom_bytes, kept_tuples=kept,
                           kept_fraction=kept / total if total else 0.0,
                           local_tuples=r_local + s_local,
                           bytes_shuffled=partition["bytes_sent"] - bloom_bytes,
                           partition_server_cycles=partition["server_cycles"])
    return res


# ---------------------------------------------------------------------------
# one-sided operators


class _OneSided:
    """Per-compute-node RDMA sessions with explicit selective signaling."""

    def __init__(self, fabric: Fabric, nodes: int, signal_every: int):
        if signal_every < 1:
            raise ValueError("signal_every must be positive")
        self.fabric = fabric
        self.nodes = nodes
        self.signal_every = signal_every
        self._qps = {}
        self._posted = {}
        self.max_write = 0
        self.signaled_writes = 0

    def qp(self, src: int, storage: int):
        key = (src, storage)
        qp = self._qps.get(key)
        if qp is None:
            qp = self.fabric.connect(src, storage, Transport.RDMA, session=f"compute{src}")
            self._qps[key] = qp
            self._posted[key] = 0
        return qp

    def write(self, src: int, addr, data: bytes, force_signal: bool = False):
        qp = self.qp(src, addr.node_id)
        key = (src, addr.node_id)
        self._posted[key] += 1
        signaled = force_signal or self._posted[key] % self.signal_every == 0
        seq = qp.post_write(addr, data, signaled=signaled)
        self.max_write = max(self.max_write, len(data))
        if signaled:
            self.signaled_writes += 1
            c = qp.wait(seq)
            if not c.ok:
                raise RuntimeError(f"remote write failed: {c.status.value}")

    def read(self, dst: int, addr, length: int, chunk: int) -> bytes:
        """Prefetch ``length`` bytes: post every READ first, then collect in order."""
        qp = self.qp(dst, addr.node_id)
        seqs = [qp.post_read(addr + lo, min(chunk, length - lo)) for lo in range(0, length, chunk)]
        parts = []
        for seq in seqs:
            c = qp.wait(seq)
            if not c.ok:
                raise RuntimeError("prefetch read failed")
            parts.append(c.result)
        return b"".join(parts)


def _histograms(rel: Relation, parts: int, part_fn):
    dest = [part_fn(k) for k in rel.keys]
    counts = np.stack([np.bincount(d, minlength=parts) for d in dest]) if rel.nodes else np.zeros((0, parts))
    return dest, counts


def _reserve(fabric: Fabric, counts: np.ndarray, width: int, owner):
    """Register one region per storage node laid out partition-major, sender-minor.

    Returns ``offsets[src, part]`` absolute addresses and per-partition (node, base, bytes).
    """
    senders, parts = counts.shape
    offsets = np.zeros((senders, parts), dtype=np.int64)
    layout = {}
    by_node: dict[int, list[int]] = {}
    for part in range(parts):
        by_node.setdefault(owner(part), []).append(part)
    for node, node_parts in by_node.items():
        total = int(counts[:, node_parts].sum()) * width
        region = fabric.register_region(STORAGE_BASE + node, max(total, 1))
        pos = region.base
        for part in node_parts:
            layout[part] = (STORAGE_BASE + node, pos, int(counts[:, part].sum()) * width)
            for src in range(senders):
                offsets[src, part] = pos
                pos += int(counts[src, part]) * width
    return offsets, layout


def _prefetch_join(ops: _OneSided, R: Relation, S: Relation, r_layout, s_layout, owner, parts: int,
                   chunk: int, radix: bool):
    out = []
    for part in range(parts):
        dst = owner(part)
        pieces = []
        for layout in (r_layout, s_layout):
            node, base, length = layout[part]
            data = ops.read(dst, RemoteAddress(node, base), length, chunk) if length else b""
            pieces.append(decode_tuples(data, R.key_only))
        (rk, rp), (sk, sp) = pieces
        if radix:
            out.append(local_radix_join(rk, rp, sk, sp, width=R.width))
        else:
            out.append(_build_probe(rk, rp, sk, sp) if len(rk) and len(sk) else
                       (np.empty(0, np.uint64),) * 3)
    return out


def rdma_ghj(R: Relation, S: Relation, chunk_bytes: int = DEFAULT_CHUNK,
             signal_every: int = DEFAULT_SIGNAL_EVERY, fabric: Fabric | None = None) -> JoinResult:
    """GHJ whose shuffle is one-sided WRITEs into exactly sized remote partitions."""
    p = _check_inputs(R, S)
    fabric = fabric or Fabric()
    ops = _OneSided(fabric, p, signal_every)
    owner = lambda part: part  # noqa: E731
    layouts = []
    for rel in (R, S):
        dest, counts = _histograms(rel, p, lambda k: partition_of(k, p, SHUFFLE_SEED))
        offsets, layout = _reserve(fabric, counts, rel.width, owner)
        for src in range(p):
            for part in range(p):
                data = rel.encode(src, dest[src] == part)
                node = STORAGE_BASE + owner(part)
                for lo in range(0, len(data), chunk_bytes):
                    # the last chunk is signaled: its completion covers every earlier one
                    ops.write(src, RemoteAddress(node, int(offsets[src, part]) + lo),
                              data[lo:lo + chunk_bytes], force_signal=lo + chunk_bytes >= len(data))
        layouts.append(layout)
    partition = _metrics(fabric, "rdma_ghj")
    parts = _prefetch_join(ops, R, S, layouts[0], layouts[1], owner, p, chunk_bytes, radix=True)
    res = JoinResult.concat(parts)
    res.metrics = _metrics(fabric, "rdma_ghj", bytes_shuffled=partition["bytes_sent"],
                           partition_server_cycles=partition["server_cycles"],
                           signaled_writes=ops.signaled_writes)
    return res


def _buffer_flushes(dest: np.ndarray, fanout: int, capacity: int):
    """Flush events of per-partition staging buffers fed in stream order.

    Returns ``(part, first_tuple_rank, n_tuples, final)`` rows in the order the
    buffers would be flushed: full buffers as they fill, partial ones at the end.
    """
    order = np.argsort(dest, kind="stable")
    counts = np.bincount(dest, minlength=fanout)
    starts = np.cumsum(counts) - counts
    rows = []
    fill_pos = []
    for part in np.flatnonzero(counts):
        n = int(counts[part])
        full = n // capacity
        for j in range(full):
            last = order[starts[part] + (j + 1) * capacity - 1]
            final = j == full - 1 and n % capacity == 0
            rows.append((int(part), j * capacity, capacity, final))
            fill_pos.append(int(last))
        if n % capacity:
            rows.append((int(part), full * capacity, n % capacity, True))
            fill_pos.append(len(dest) + int(part))
    ranked = sorted(range(len(rows)), key=fill_pos.__getitem__)
    return [rows[i] for i in ranked], order, starts


def rrj(R: Relation, S: Relation, fanout: int | None = None, buffer_bytes: int = BUFFER_BYTES,
        l3_budget: int = L3_BUDGET, signal_every: int = DEFAULT_SIGNAL_EVERY,
        chunk_bytes: int = DEFAULT_CHUNK, fabric: Fabric | None = None) -> JoinResult:
    """RDMA radix join: one remote radix pass through 2KiB software-managed buffers."""
    p = _check_inputs(R, S)
    if fanout is None:
        fanout = default_fanout((len(R) + len(S)) * R.width, minimum=p, budget=l3_budget,
                                buffer_bytes=buffer_bytes)
    if fanout * buffer_bytes > l3_budget:
        raise ValueError(f"fan-out {fanout} x {buffer_bytes}B buffers exceeds the L3 budget")
    if fanout < 1 or fanout & (fanout - 1):
        raise ValueError("fan-out must be a power of two")
    capacity = buffer_bytes // R.width
    if capacity < 1:
        raise ValueError("buffer smaller than one tuple")
    fabric = fabric or Fabric()
    ops = _OneSided(fabric, p, signal_every)
    owner = lambda part: part % p  # noqa: E731
    radix = lambda k: (mix64(k, SHUFFLE_SEED) & np.uint64(fanout - 1)).astype(np.int64)  # noqa: E731
    layouts, final_flushes, buffers_used = [], 0, 0
    for rel in (R, S):
        dest, counts = _histograms(rel, fanout, radix)
        offsets, layout = _reserve(fabric, counts, rel.width, owner)
        for src in range(p):
            keys, pays = rel.keys[src], rel.payloads[src]
            flushes, order, starts = _buffer_flushes(dest[src], fanout, capacity)
            for part, rank, n, final in flushes:
                idx = order[starts[part] + rank: starts[part] + rank + n]
                data = encode_tuples(keys[idx], pays[idx], rel.key_only)
                addr = RemoteAddress(STORAGE_BASE + owner(part), int(offsets[src, part]) + rank * rel.width)
                ops.write(src, addr, data, force_signal=final)
                final_flushes += final
            buffers_used += int(np.count_nonzero(counts[src]))
        layouts.append(layout)
    partition = _metrics(fabric, "rrj")
    parts = _prefetch_join(ops, R, S, layouts[0], layouts[1], owner, fanout, chunk_bytes, radix=False)
    res = JoinResult.concat(parts)
    res.metrics = _metrics(fabric, "rrj", fanout=fanout, bytes_shuffled=partition["bytes_sent"],
                           partition_server_cycles=partition["server_cycles"],
                           max_write_bytes=ops.max_write, final_signaled_flushes=final_flushes,
                           buffers_used=buffers_used, signaled_writes=ops.signaled_writes)
    return res


JOIN_ALGORITHMS = {
    "ghj": ghj,
    "ghj_bloom": ghj_bloom,
    "rdma_ghj": rdma_ghj,
    "rrj": rrj,
}
