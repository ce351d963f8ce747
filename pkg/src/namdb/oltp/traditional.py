"""Traditional 2PC snapshot isolation on a shared-nothing cluster.

A transaction manager (TM) coordinates resource managers (RMs) that own their
partitions in local memory.  Every interaction is a two-sided message over the
configured transport.  The commit follows the classic message sequence with
its usual parallelization::

    client -> TM            commit request                   (one-way)
    TM <-> TS               commit timestamp      } in parallel
    TM <-> RM_i             prepare / vote        }
    TM -> client            outcome               } in parallel
    TM <-> RM_i             commit / ack          }
    TM -> TS                publish timestamp                (one-way)

The timestamp server (TS) sits next to the TM; its own message handling is
not part of the server-side tally.
"""

from __future__ import annotations

import enum
import itertools
import struct
import threading
from dataclasses import dataclass

import numpy as np

from ..fabric import Fabric, QueuePair, Transport, receive
from .txn import (
    AbortReason,
    Outcome,
    ProtocolTally,
    ReadRecord,
    SnapshotUnavailable,
    TransactionAborted,
    TxnDescriptor,
)

MAX_MESSAGE = 1 << 22

_txn_ids = itertools.count(1)


class Kind(enum.IntEnum):
    COMMIT_REQUEST = 1
    CID_REQUEST = 2
    CID_REPLY = 3
    PREPARE = 4
    VOTE = 5
    COMMIT = 6
    ABORT = 7
    ACK = 8
    PUBLISH = 9
    NOTIFY = 10
    RID_REQUEST = 11
    RID_REPLY = 12
    READ = 13
    READ_REPLY = 14


_HEAD = struct.Struct("<BQqI")
_ENTRY = struct.Struct("<BqqI")


@dataclass
class Message:
    kind: Kind
    txn: int = 0
    arg: int = 0
    entries: tuple = ()  # (table id, key, cid, payload)

    def encode(self) -> bytes:
        parts = [_HEAD.pack(self.kind, self.txn, self.arg, len(self.entries))]
        for table, key, cid, payload in self.entries:
            parts.append(_ENTRY.pack(table, key, cid, len(payload)))
            parts.append(payload)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        kind, txn, arg, n = _HEAD.unpack_from(data)
        pos = _HEAD.size
        entries = []
        for _ in range(n):
            table, key, cid, length = _ENTRY.unpack_from(data, pos)
            pos += _ENTRY.size
            entries.append((table, key, cid, bytes(data[pos:pos + length])))
            pos += length
        return cls(Kind(kind), txn, arg, tuple(entries))


class TimestampServer:
    """Hands out commit timestamps in request order; RID is the published prefix."""

    def __init__(self, capacity: int = 1 << 20):
        self._lock = threading.Lock()
        self._next = 1
        self._bits = np.zeros(capacity, dtype=bool)
        self._rid = 0

    def handle(self, msg: Message) -> Message | None:
        with self._lock:
            if msg.kind is Kind.CID_REQUEST:
                cid = self._next
                self._next += 1
                return Message(Kind.CID_REPLY, msg.txn, cid)
            if msg.kind is Kind.PUBLISH:
                self._bits[msg.arg - 1] = True
                while self._rid < self._bits.size and self._bits[self._rid]:
                    self._rid += 1
                return None
            if msg.kind is Kind.RID_REQUEST:
                return Message(Kind.RID_REPLY, msg.txn, self._rid)
        raise ValueError(f"timestamp server cannot handle {msg.kind!r}")


@dataclass
class Row:
    cid: int
    payload: bytes
    owner: int | None = None


class ResourceManager:
    """One shared-nothing partition; validation and locking run on its CPU."""

    def __init__(self, node_id: int, node_index: int, num_rms: int):
        self.node_id = node_id
        self.node_index = node_index
        self.num_rms = num_rms
        self.rows: dict[tuple[int, int], Row] = {}
        self._next_local: dict[int, int] = {}
        self._lock = threading.Lock()

    def load(self, table: int, key: int, payload: bytes, cid: int = 0) -> None:
        self.rows[(table, key)] = Row(cid, bytes(payload))
        local = key // self.num_rms + 1
        self._next_local[table] = max(self._next_local.get(table, 0), local)

    def _allocate(self, table: int) -> int:
        local = self._next_local.get(table, 0)
        self._next_local[table] = local + 1
        return local * self.num_rms + self.node_index

    def handle(self, msg: Message) -> Message:
        with self._lock:
            if msg.kind is Kind.READ:
                table, key, rid, _ = msg.entries[0]
                row = self.rows.get((table, key))
                if row is None or row.cid > rid:
                    return Message(Kind.READ_REPLY, msg.txn, 0)
                return Message(Kind.READ_REPLY, msg.txn, 1, ((table, key, row.cid, row.payload),))
            if msg.kind is Kind.PREPARE:
                rows = [self.rows.get((t, k)) for t, k, _, _ in msg.entries]
                ok = all(r is not None and r.owner is None and r.cid == observed
                         for r, (_, _, observed, _) in zip(rows, msg.entries))
                if ok:
                    for r in rows:
                        r.owner = msg.txn
                return Message(Kind.VOTE, msg.txn, int(ok))
            if msg.kind is Kind.COMMIT:
                created = []
                for table, key, _, payload in msg.entries:
                    if key < 0:
                        key = self._allocate(table)
                        self.rows[(table, key)] = Row(msg.arg, payload)
                        created.append((table, key, msg.arg, b""))
                        continue
                    row = self.rows[(table, key)]
                    if row.owner != msg.txn:
                        raise RuntimeError(f"txn {msg.txn} commits {key} without holding its lock")
                    row.cid, row.payload, row.owner = msg.arg, payload, None
                return Message(Kind.ACK, msg.txn, 0, tuple(created))
            if msg.kind is Kind.ABORT:
                for row in self.rows.values():
                    if row.owner == msg.txn:
                        row.owner = None
                return Message(Kind.ACK, msg.txn)
        raise ValueError(f"resource manager cannot handle {msg.kind!r}")


class TraditionalCluster:
    """Shared-nothing deployment: one TM (with co-located TS) and ``len(rm_nodes)`` RMs."""

    def __init__(self, fabric: Fabric, rm_nodes, tm_node: int, ts_node: int,
                 transport=Transport.IPOETH):
        self.fabric = fabric
        self.transport = Transport.parse(transport)
        self.rm_nodes = list(rm_nodes)
        self.tm_node = tm_node
        self.ts_node = ts_node
        self.rms = [ResourceManager(n, i, len(self.rm_nodes)) for i, n in enumerate(self.rm_nodes)]
        self.ts = TimestampServer()
        self.tables: dict[str, int] = {}
        self.server_nodes = frozenset([tm_node, *self.rm_nodes])

    def create_table(self, name: str) -> int:
        return self.tables.setdefault(name, len(self.tables))

    def rm_for(self, key: int) -> ResourceManager:
        return self.rms[key % len(self.rms)]

    def load(self, table: str, payloads, cid: int = 0) -> list[int]:
        tid = self.create_table(table)
        for key, payload in enumerate(payloads):
            self.rm_for(key).load(tid, key, payload, cid)
        return list(range(len(payloads)))

    def client(self, client_id: int, node_id: int) -> "TradClient":
        return TradClient(self, client_id, node_id)


class TradClient:
    """A client plus the TM-side connections used on its behalf."""

    def __init__(self, cluster: TraditionalCluster, client_id: int, node_id: int):
        self.cluster = cluster
        self.client_id = client_id
        self.node_id = node_id
        fabric, t = cluster.fabric, cluster.transport
        name = f"trad-client{client_id}"
        self._to_tm = fabric.connect(node_id, cluster.tm_node, t, session=name)
        self._to_ts = fabric.connect(node_id, cluster.ts_node, t, session=name)
        self._to_rm = [fabric.connect(node_id, rm.node_id, t, session=name) for rm in cluster.rms]
        self._tm_ts = fabric.connect(cluster.tm_node, cluster.ts_node, t, session=name + "-tm")
        self._tm_rm = [fabric.connect(cluster.tm_node, rm.node_id, t, session=name + "-tm")
                       for rm in cluster.rms]

    # messaging -------------------------------------------------------------

    def _count(self, tally: ProtocolTally, src: int, dst: int) -> None:
        tally.send += 1
        tally.receive += 1
        if src in self.cluster.server_nodes:
            tally.m_s += 1
        if dst in self.cluster.server_nodes:
            tally.m_r += 1

    def _deliver(self, qp: QueuePair, msg: Message, tally: ProtocolTally) -> Message:
        """SEND ``msg`` from ``qp`` to its peer, which has a RECEIVE posted first."""
        seq = qp.peer.post_receive(MAX_MESSAGE)
        qp.post_send(msg.encode())
        self._count(tally, qp.node_id, qp.remote_node)
        return Message.decode(receive(qp.peer, seq))

    def _rpc(self, qp: QueuePair, msg: Message, handler, tally: ProtocolTally) -> Message | None:
        reply = handler(self._deliver(qp, msg, tally))
        if reply is None:
            return None
        return self._deliver(qp.peer, reply, tally)

    # transaction API ---------------------------------------------------------

    def begin(self) -> TxnDescriptor:
        txn = TxnDescriptor(next(_txn_ids), self.client_id, 0)
        reply = self._rpc(self._to_ts, Message(Kind.RID_REQUEST, txn.txn_id),
                          self.cluster.ts.handle, txn.read_tally)
        txn.rid = reply.arg
        return txn

    def read(self, txn: TxnDescriptor, table: str, key: int) -> bytes:
        if not txn.active:
            raise TransactionAborted(txn, "not active")
        tid = self.cluster.tables[table]
        rm = self.cluster.rm_for(key)
        msg = Message(Kind.READ, txn.txn_id, 0, ((tid, key, txn.rid, b""),))
        reply = self._rpc(self._to_rm[rm.node_index], msg, rm.handle, txn.read_tally)
        if not reply.arg:
            txn.outcome = Outcome.ABORTED
            txn.reason = AbortReason.SNAPSHOT_UNAVAILABLE
            raise SnapshotUnavailable(txn, f"{table}:{key} newer than rid {txn.rid}")
        _, _, cid, payload = reply.entries[0]
        txn.reads.append(ReadRecord(table, key, cid))
        return payload

    def update(self, txn: TxnDescriptor, table: str, key: int, payload: bytes) -> None:
        txn.require_read(table, key)
        txn.writes[(table, key)] = bytes(payload)

    def insert(self, txn: TxnDescriptor, table: str, payload: bytes) -> None:
        txn.inserts.append((table, bytes(payload)))

    def commit(self, txn: TxnDescriptor) -> Outcome:
        return trad_commit_txn(self, txn)


def trad_commit_txn(client: TradClient, txn: TxnDescriptor) -> Outcome:
    """Run the full commit message sequence for ``txn`` and return its outcome."""
    if not txn.active:
        return txn.outcome
    if txn.read_only:
        txn.outcome = Outcome.COMMITTED
        return txn.outcome
    cluster, tally = client.cluster, txn.tally
    tables = cluster.tables

    # group the write set by RM; inserts go to RMs already in the transaction
    parts: dict[int, dict[str, list]] = {}
    for (table, key), payload in txn.writes.items():
        rm = cluster.rm_for(key)
        part = parts.setdefault(rm.node_index, {"prepare": [], "commit": []})
        observed = txn.require_read(table, key)
        part["prepare"].append((tables[table], key, observed, b""))
        part["commit"].append((tables[table], key, 0, payload))
    order = sorted(parts) or [txn.txn_id % len(cluster.rms)]
    for i, (table, payload) in enumerate(txn.inserts):
        part = parts.setdefault(order[i % len(order)], {"prepare": [], "commit": []})
        part["commit"].append((cluster.create_table(table), -1, 0, payload))
    participants = sorted(parts)
    txn.participants = tuple(cluster.rms[i].node_id for i in participants)

    request_entries = tuple(e for i in participants for e in parts[i]["commit"])
    client._deliver(client._to_tm, Message(Kind.COMMIT_REQUEST, txn.txn_id, txn.rid, request_entries),
                    tally)

    # timestamp request and prepare round run in parallel
    cid = client._rpc(client._tm_ts, Message(Kind.CID_REQUEST, txn.txn_id),
                      cluster.ts.handle, tally).arg
    txn.cid = cid
    votes = {}
    for i in participants:
        rm = cluster.rms[i]
        msg = Message(Kind.PREPARE, txn.txn_id, txn.rid, tuple(parts[i]["prepare"]))
        votes[i] = client._rpc(client._tm_rm[i], msg, rm.handle, tally).arg

    if all(votes.values()):
        txn.outcome = Outcome.COMMITTED
        client._deliver(client._to_tm.peer, Message(Kind.NOTIFY, txn.txn_id, 1), tally)
        for i in participants:
            rm = cluster.rms[i]
            ack = client._rpc(client._tm_rm[i], Message(Kind.COMMIT, txn.txn_id, cid,
                                                         tuple(parts[i]["commit"])), rm.handle, tally)
            txn.inserted.extend((_table_name(tables, t), k) for t, k, _, _ in ack.entries)
    else:
        txn.outcome = Outcome.ABORTED
        txn.reason = AbortReason.VALIDATION
        for i in participants:
            if votes[i]:
                rm = cluster.rms[i]
                client._rpc(client._tm_rm[i], Message(Kind.ABORT, txn.txn_id), rm.handle, tally)
        client._deliver(client._to_tm.peer, Message(Kind.NOTIFY, txn.txn_id, 0), tally)
    # a consumed timestamp is published either way so the read timestamp can advance
    client._rpc(client._tm_ts, Message(Kind.PUBLISH, txn.txn_id, cid), cluster.ts.handle, tally)
    return txn.outcome


def _table_name(tables: dict[str, int], tid: int) -> str:
    for name, i in tables.items():
        if i == tid:
            return name
    raise KeyError(tid)


def trad_prepare(rm: ResourceManager, txn_id: int, entries) -> bool:
    """Validate observed CIDs and lock; ``entries`` are ``(table id, key, observed cid)``."""
    msg = Message(Kind.PREPARE, txn_id, 0, tuple((t, k, c, b"") for t, k, c in entries))
    return bool(rm.handle(msg).arg)


def trad_commit(rm: ResourceManager, txn_id: int, entries, cid: int) -> None:
    """Install ``(table id, key, payload)`` versions at ``cid`` and release the locks."""
    rm.handle(Message(Kind.COMMIT, txn_id, cid, tuple((t, k, 0, p) for t, k, p in entries)))
