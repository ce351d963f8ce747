from .history import Violation, check_history, si_schedule_exists
from .rsi import RsiClient, rsi_commit, rsi_read
from .traditional import TradClient, TraditionalCluster, trad_commit, trad_commit_txn, trad_prepare
from .txn import (
    AbortReason,
    BlindWrite,
    LockContention,
    Outcome,
    ProtocolTally,
    SnapshotUnavailable,
    TransactionAborted,
    TxnDescriptor,
    read_history,
    write_history,
)

__all__ = [
    "AbortReason", "BlindWrite", "LockContention", "Outcome", "ProtocolTally", "RsiClient",
    "SnapshotUnavailable", "TradClient", "TraditionalCluster", "TransactionAborted",
    "TxnDescriptor", "Violation", "check_history", "read_history", "rsi_commit", "rsi_read",
    "si_schedule_exists", "trad_commit", "trad_commit_txn", "trad_prepare", "write_history",
]
