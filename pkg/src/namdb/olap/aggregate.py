"""Distributed group-by aggregation: hierarchical merge vs. RDMA pre-aggregation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..fabric import Fabric, RemoteAddress, Transport, receive
from .join import STORAGE_BASE, _metrics
from .relation import Relation, partition_of

AGG_SEED = 0xA66
ROW = np.dtype([("key", "<u8"), ("value", "<u8")])
DEFAULT_TABLE_ROWS = 4096  # 64KiB of 16B rows


class AggFn(str, enum.Enum):
    SUM = "sum"
    COUNT = "count"
    MIN = "min"
    MAX = "max"

    @classmethod
    def parse(cls, value) -> "AggFn":
        return value if isinstance(value, cls) else cls(str(value).lower())

    @property
    def combine(self) -> np.ufunc:
        # partial COUNTs are merged by summing them
        return {AggFn.SUM: np.add, AggFn.COUNT: np.add, AggFn.MIN: np.minimum, AggFn.MAX: np.maximum}[self]


@dataclass
class AggResult:
    keys: np.ndarray
    values: np.ndarray
    metrics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keys)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.keys.tolist(), self.values.tolist()))

    def same_as(self, other: "AggResult") -> bool:
        return np.array_equal(self.keys, other.keys) and np.array_equal(self.values, other.values)


def _reduce(keys: np.ndarray, values: np.ndarray, ufunc: np.ufunc):
    """Group by key; output sorted by key."""
    if len(keys) == 0:
        return np.empty(0, np.uint64), np.empty(0, np.uint64)
    uniq, inv = np.unique(keys, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(inv[order]) != 0])
    return uniq, ufunc.reduceat(values[order], starts).astype(np.uint64)


def _local(keys, values, fn: AggFn):
    values = np.ones(len(keys), np.uint64) if fn is AggFn.COUNT else np.asarray(values, np.uint64)
    return _reduce(np.asarray(keys, np.uint64), values, fn.combine)


def _encode(keys, values) -> bytes:
    out = np.empty(len(keys), dtype=ROW)
    out["key"], out["value"] = keys, values
    return out.tobytes()


def _decode(data: bytes):
    arr = np.frombuffer(data, dtype=ROW)
    return arr["key"].astype(np.uint64), arr["value"].astype(np.uint64)


def aggregate_oracle(rel: Relation, agg_fn="sum") -> AggResult:
    """Single-threaded dictionary aggregation, one tuple at a time."""
    fn = AggFn.parse(agg_fn)
    table: dict[int, int] = {}
    for k, v in zip(rel.all_keys.tolist(), rel.all_payloads.tolist()):
        if fn is AggFn.COUNT:
            table[k] = table.get(k, 0) + 1
        elif k not in table:
            table[k] = v
        elif fn is AggFn.SUM:
            table[k] += v
        elif fn is AggFn.MIN:
            table[k] = min(table[k], v)
        else:
            table[k] = max(table[k], v)
    keys = np.array(sorted(table), dtype=np.uint64)
    values = np.array([table[k] for k in keys.tolist()], dtype=np.uint64)
    return AggResult(keys, values, {"algorithm": "oracle"})


def agg_hierarchical(rel: Relation, agg_fn="sum", transport=Transport.IPOETH, coordinator: int = 0,
                     chunk_bytes: int = 64 * 1024, fabric: Fabric | None = None) -> AggResult:
    """Local aggregation per node, union shipped to one node, then a post-aggregation."""
    fn = AggFn.parse(agg_fn)
    fabric = fabric or Fabric()
    transport = Transport.parse(transport)
    union_k, union_v, shipped = [], [], 0
    for node in range(rel.nodes):
        k, v = _local(rel.keys[node], rel.payloads[node], fn)
        shipped += len(k)
        if node != coordinator and len(k):
            qp = fabric.connect(node, coordinator, transport, session=f"agg{node}")
            data = _encode(k, v)
            step = chunk_bytes // ROW.itemsize * ROW.itemsize
            got = []
            for lo in range(0, len(data), step):
                seq = qp.peer.post_receive(len(data[lo:lo + step]))
                qp.post_send(data[lo:lo + step])
                got.append(receive(qp.peer, seq))
            k, v = _decode(b"".join(got))
        union_k.append(k)
        union_v.append(v)
    keys = np.concatenate(union_k) if union_k else np.empty(0, np.uint64)
    values = np.concatenate(union_v) if union_v else np.empty(0, np.uint64)
    k, v = _reduce(keys, values, fn.combine)
    return AggResult(k, v, _metrics(fabric, "agg_hierarchical", union_rows=shipped))


def agg_rdma(rel: Relation, agg_fn="sum", threads_per_node: int = 2,
             table_rows: int = DEFAULT_TABLE_ROWS, partitions: int | None = None, slack: float = 2.0,
             region_rows: int | None = None, fabric: Fabric | None = None) -> AggResult:
    """Cache-sized per-worker pre-aggregation with one-sided overflow to remote partitions.

    Each worker streams its input through a table of at most ``table_rows``
    groups.  When the next chunk would overflow it, the table is flushed to
    hash-partitioned remote regions: a FETCH_ADD on the partition cursor
    reserves space and an unsignaled WRITE copies the rows.  Phase two reads
    every partition and post-aggregates it; there are more partitions than
    workers so stragglers can be balanced.
    """
    fn = AggFn.parse(agg_fn)
    if table_rows < 1 or threads_per_node < 1:
        raise ValueError("table_rows and threads_per_node must be positive")
    fabric = fabric or Fabric()
    nodes = rel.nodes
    workers = nodes * threads_per_node
    partitions = partitions or 2 * workers
    if partitions <= workers:
        raise ValueError("phase two needs more partitions than workers")
    total = len(rel)
    if region_rows is None:
        region_rows = int(np.ceil(slack * total / partitions)) + workers
    owner = lambda part: part % nodes  # noqa: E731

    cursors, regions = {}, {}
    for part in range(partitions):
        node = STORAGE_BASE + owner(part)
        cursors[part] = fabric.register_region(node, 8).address
        regions[part] = fabric.register_region(node, region_rows * ROW.itemsize)
    sessions = {}

    def qp(worker, part):
        key = (worker, owner(part))
        if key not in sessions:
            sessions[key] = fabric.connect(worker // threads_per_node, STORAGE_BASE + owner(part),
                                           Transport.RDMA, session=f"worker{worker}")
        return sessions[key]

    stats = {"overflow_flushes": 0, "final_flushes": 0, "rows_flushed": 0}

    def flush(worker, keys, values, final):
        if not len(keys):
            return
        dest = partition_of(keys, partitions, AGG_SEED)
        for part in np.unique(dest):
            mask = dest == part
            rows = int(mask.sum())
            q = qp(worker, int(part))
            c = q.wait(q.post_fetch_add(cursors[int(part)], rows))
            start = c.value
            if start + rows > region_rows:
                raise OverflowError(f"overflow region of partition {int(part)} exhausted")
            addr = RemoteAddress(regions[int(part)].node_id, regions[int(part)].base + start * ROW.itemsize)
            # overflow copies run in the background; the final one is waited for
            seq = q.post_write(addr, _encode(keys[mask], values[mask]), signaled=final)
            if final and not q.wait(seq).ok:
                raise RuntimeError("final flush failed")
            stats["rows_flushed"] += rows
        stats["final_flushes" if final else "overflow_flushes"] += 1

    # phase 1
    for node in range(nodes):
        bounds = np.linspace(0, len(rel.keys[node]), threads_per_node + 1).astype(int)
        for t in range(threads_per_node):
            worker = node * threads_per_node + t
            keys = rel.keys[node][bounds[t]:bounds[t + 1]]
            vals = rel.payloads[node][bounds[t]:bounds[t + 1]]
            tk, tv = np.empty(0, np.uint64), np.empty(0, np.uint64)
            for lo in range(0, len(keys), table_rows):
                ck, cv = _local(keys[lo:lo + table_rows], vals[lo:lo + table_rows], fn)
                mk, mv = _reduce(np.r_[tk, ck], np.r_[tv, cv], fn.combine)
                if len(mk) > table_rows:
                    flush(worker, tk, tv, final=False)
                    tk, tv = ck, cv
                else:
                    tk, tv = mk, mv
            flush(worker, tk, tv, final=True)
    partition_metrics = _metrics(fabric, "agg_rdma")

    # phase 2: worker part % workers post-aggregates partition part
    out_k, out_v, sizes = [], [], []
    for part in range(partitions):
        worker = part % workers
        q = qp(worker, part)
        used = int.from_bytes(q.wait(q.post_read(cursors[part], 8)).result, "little")
        sizes.append(used)
        if not used:
            continue
        data = q.wait(q.post_read(regions[part].address, used * ROW.itemsize)).result
        k, v = _reduce(*_decode(data), fn.combine)
        out_k.append(k)
        out_v.append(v)
    keys = np.concatenate(out_k) if out_k else np.empty(0, np.uint64)
    values = np.concatenate(out_v) if out_v else np.empty(0, np.uint64)
    order = np.argsort(keys, kind="stable")
    return AggResult(keys[order], values[order],
                     _metrics(fabric, "agg_rdma", workers=workers, partitions=partitions,
                              partition_rows=sizes, table_rows=table_rows,
                              partition_server_cycles=partition_metrics["server_cycles"], **stats))


AGG_ALGORITHMS = {"agg_hierarchical": agg_hierarchical, "agg_rdma": agg_rdma}
