"""RSI: client-driven snapshot isolation over one-sided verbs.

The client is its own transaction manager.  Commit needs no storage-node CPU:

1. take the next pre-assigned commit timestamp (local);
2. CAS every updated header from ``(0, observed)`` to ``(1, observed)``,
   which validates and locks in one round trip;
3. on any failure, write back the old header of each record it locked;
4. otherwise write each whole block with the new version at its head and an
   unlocked header, which installs and unlocks at once;
5. publish the timestamp with an unsignaled WRITE.
"""

from __future__ import annotations

import itertools

from ..fabric import AccessError, Session
from ..oracle import TimestampOracle
from ..store import RecordBlock, Store, encode_header
from .txn import (
    AbortReason,
    LockContention,
    Outcome,
    ReadRecord,
    SnapshotUnavailable,
    TransactionAborted,
    TxnDescriptor,
)

DEFAULT_READ_RETRIES = 10

_txn_ids = itertools.count(1)


class RsiClient:
    def __init__(self, store: Store, oracle: TimestampOracle, client_id: int, session: Session,
                 max_read_retries: int = DEFAULT_READ_RETRIES):
        self.store = store
        self.oracle = oracle
        self.client_id = client_id
        self.session = session
        self.max_read_retries = max_read_retries

    def begin(self) -> TxnDescriptor:
        rid = self.oracle.current_rid(self.session)
        txn = TxnDescriptor(next(_txn_ids), self.client_id, rid)
        txn.read_tally.read += 1
        return txn

    def _abort(self, txn: TxnDescriptor, exc_type, detail: str = ""):
        # burn one timestamp so a client stuck in read aborts cannot hold the RID back
        self.oracle.publish_commit(self.session, self.client_id, self.oracle.next_cid(self.client_id))
        txn.read_tally.write_unsignaled += 1
        txn.outcome = Outcome.ABORTED
        txn.reason = exc_type.reason
        raise exc_type(txn, detail)

    def read(self, txn: TxnDescriptor, table: str, key: int) -> bytes:
        """Snapshot read of ``table:key`` at ``txn.rid``."""
        if not txn.active:
            raise TransactionAborted(txn, "not active")
        for _ in range(self.max_read_retries + 1):
            block = self.store.read_block(self.session, table, key)
            txn.read_tally.read += 1
            if not block.lock:
                break
        else:
            self._abort(txn, LockContention, f"{table}:{key} stayed locked")
        version = block.version_at(txn.rid)
        if version is None:
            self._abort(txn, SnapshotUnavailable, f"{table}:{key} head {block.cid} > rid {txn.rid}")
        cid, payload = version
        txn.reads.append(ReadRecord(table, key, cid))
        txn.observed[(table, key)] = block
        return payload

    def update(self, txn: TxnDescriptor, table: str, key: int, payload: bytes) -> None:
        txn.require_read(table, key)
        width = self.store.dictionary.table(table).payload_width
        if len(payload) != width:
            raise ValueError(f"payload must be {width} bytes")
        txn.writes[(table, key)] = bytes(payload)

    def insert(self, txn: TxnDescriptor, table: str, payload: bytes) -> None:
        txn.inserts.append((table, bytes(payload)))

    def commit(self, txn: TxnDescriptor) -> Outcome:
        if not txn.active:
            return txn.outcome
        if txn.read_only:
            txn.outcome = Outcome.COMMITTED
            return txn.outcome

        store, session, tally = self.store, self.session, txn.tally
        cid = self.oracle.next_cid(self.client_id)
        txn.cid = cid

        targets = []
        for (table, key), payload in txn.writes.items():
            addr = store.dictionary.locate(table, key)
            targets.append((addr, table, key, txn.require_read(table, key), payload))
        targets.sort(key=lambda t: (t[0].node_id, t[0].offset))
        txn.participants = tuple(sorted({t[0].node_id for t in targets}))

        # validate + lock
        posted = []
        for addr, table, key, observed, _ in targets:
            qp = session.qp(addr.node_id)
            seq = qp.post_cas(addr, encode_header(0, observed), encode_header(1, observed))
            posted.append((qp, seq))
            tally.cas += 1
        locked, failed = [], False
        for target, (qp, seq) in zip(targets, posted):
            c = qp.wait(seq)
            if c.ok and c.value == encode_header(0, target[3]):
                locked.append(target)
            else:
                failed = True
        if failed:
            self._rollback(txn, locked)
            return txn.outcome

        # install + unlock; inserts never conflict
        try:
            waits = []
            for addr, table, key, observed, payload in targets:
                block = self._base_block(txn, table, key, observed).installed(cid, payload)
                qp = session.qp(addr.node_id)
                waits.append((qp, qp.post_write(addr, block.to_bytes(), signaled=True)))
                tally.write_signaled += 1
            for table, payload in txn.inserts:
                key = store.allocate(session, table)
                tally.fetch_add += 1
                addr = store.dictionary.locate(table, key)
                info = store.dictionary.table(table)
                qp = session.qp(addr.node_id)
                block = RecordBlock.fresh(payload, cid, info.slots)
                waits.append((qp, qp.post_write(addr, block.to_bytes(), signaled=True)))
                tally.insert_write += 1
                txn.inserted.append((table, key))
            for qp, seq in waits:
                if not qp.wait(seq).ok:
                    raise AccessError(f"install failed for txn {txn.txn_id}")
        except AccessError:
            self._rollback(txn, targets, reason=AbortReason.FABRIC, restore=True)
            return txn.outcome

        self.oracle.publish_commit(session, self.client_id, cid)
        tally.write_unsignaled += 1
        txn.outcome = Outcome.COMMITTED
        return txn.outcome

    def _base_block(self, txn, table, key, observed) -> RecordBlock:
        block = txn.observed[(table, key)]
        # the CAS proved the head is still ``observed``, so the cached block is current
        assert block.cid == observed
        return block

    def _rollback(self, txn: TxnDescriptor, locked, reason=AbortReason.VALIDATION,
                  restore: bool = False) -> None:
        for addr, table, key, observed, _ in locked:
            if restore:
                # blocks may already hold the new version: put the whole old block back
                data = txn.observed[(table, key)].to_bytes()
            else:
                data = encode_header(0, observed).to_bytes(8, "little")
            self.session.write(addr, data, signaled=True)
            txn.tally.rollback_write += 1
        # the timestamp was consumed; mark it so the read timestamp can advance past it
        self.oracle.publish_commit(self.session, self.client_id, txn.cid)
        txn.tally.write_unsignaled += 1
        txn.outcome = Outcome.ABORTED
        txn.reason = reason


def rsi_read(client: RsiClient, txn: TxnDescriptor, table: str, key: int) -> bytes:
    return client.read(txn, table, key)


def rsi_commit(client: RsiClient, txn: TxnDescriptor) -> Outcome:
    return client.commit(txn)
