from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields
from typing import Iterable


class Outcome(enum.Enum):
    ACTIVE = "ACTIVE"
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"


class AbortReason(str, enum.Enum):
    VALIDATION = "validation"
    SNAPSHOT_UNAVAILABLE = "snapshot_unavailable"
    LOCK_CONTENTION = "lock_contention"
    FABRIC = "fabric"


class TransactionAborted(Exception):
    reason = AbortReason.VALIDATION

    def __init__(self, txn: "TxnDescriptor", detail: str = ""):
        super().__init__(f"txn {txn.txn_id} aborted ({self.reason.value}) {detail}".rstrip())
        self.txn = txn


class SnapshotUnavailable(TransactionAborted):
    reason = AbortReason.SNAPSHOT_UNAVAILABLE


class LockContention(TransactionAborted):
    reason = AbortReason.LOCK_CONTENTION


class BlindWrite(ValueError):
    """An update targets a record the transaction never read."""


@dataclass
class ProtocolTally:
    """Verb and message counts attributed to one transaction."""

    read: int = 0
    cas: int = 0
    fetch_add: int = 0
    write_signaled: int = 0
    write_unsignaled: int = 0
    insert_write: int = 0
    rollback_write: int = 0
    send: int = 0
    receive: int = 0
    m_r: int = 0  # receives handled by server nodes (TM + RMs)
    m_s: int = 0  # sends issued by server nodes

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __iadd__(self, other: "ProtocolTally") -> "ProtocolTally":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self


@dataclass
class ReadRecord:
    table: str
    key: int
    cid: int


@dataclass
class TxnDescriptor:
    txn_id: int
    client: int
    rid: int
    reads: list[ReadRecord] = field(default_factory=list)
    writes: dict[tuple[str, int], bytes] = field(default_factory=dict)
    inserts: list[tuple[str, bytes]] = field(default_factory=list)
    inserted: list[tuple[str, int]] = field(default_factory=list)
    cid: int | None = None
    outcome: Outcome = Outcome.ACTIVE
    reason: AbortReason | None = None
    tally: ProtocolTally = field(default_factory=ProtocolTally)
    read_tally: ProtocolTally = field(default_factory=ProtocolTally)
    participants: tuple[int, ...] = ()
    # per-transaction state the protocol keeps between read and commit
    observed: dict = field(default_factory=dict, repr=False)

    @property
    def active(self) -> bool:
        return self.outcome is Outcome.ACTIVE

    @property
    def read_only(self) -> bool:
        return not self.writes and not self.inserts

    def observed_cid(self, table: str, key: int) -> int | None:
        for r in self.reads:
            if r.table == table and r.key == key:
                return r.cid
        return None

    def require_read(self, table: str, key: int) -> int:
        cid = self.observed_cid(table, key)
        if cid is None:
            raise BlindWrite(f"txn {self.txn_id} updates {table}:{key} without reading it")
        return cid

    def to_record(self) -> dict:
        return {
            "txn": self.txn_id,
            "client": self.client,
            "rid": self.rid,
            "cid": self.cid,
            "outcome": self.outcome.value,
            "reason": self.reason.value if self.reason else None,
            "reads": [[r.table, r.key, r.cid] for r in self.reads],
            "writes": [[t, k] for t, k in self.writes],
            "inserts": [[t, k] for t, k in self.inserted],
        }


def write_history(path, txns: Iterable[TxnDescriptor]) -> None:
    """One JSON object per line, one line per transaction."""
    with open(path, "w") as fh:
        for txn in txns:
            fh.write(json.dumps(txn.to_record(), separators=(",", ":")) + "\n")


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
