"""Snapshot-isolation checks over recorded transaction histories.

:func:`check_history` is the statistical checker used on every run: it relies
on the recorded RID/CID timestamps.  :func:`si_schedule_exists` is the
brute-force validator: it ignores timestamps entirely and searches every
interleaving of start/commit events for one that explains the observed reads
under SI.  It is exponential and meant for histories of a handful of
transactions.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .txn import Outcome, TxnDescriptor

INITIAL = 0


@dataclass(frozen=True)
class Violation:
    kind: str
    txn: int
    detail: str

    def __str__(self):
        return f"{self.kind} (txn {self.txn}): {self.detail}"


def _normalize(entry) -> dict:
    if isinstance(entry, TxnDescriptor):
        entry = entry.to_record()
    return {
        "txn": entry["txn"],
        "rid": entry["rid"],
        "cid": entry.get("cid"),
        "outcome": entry["outcome"],
        "reads": [(t, int(k), int(c)) for t, k, c in entry.get("reads", ())],
        "writes": [(t, int(k)) for t, k in entry.get("writes", ())],
        "inserts": [(t, int(k)) for t, k in entry.get("inserts", ())],
    }


def check_history(history) -> list[Violation]:
    """Return every SI violation found in ``history`` (empty means it passes).

    Checks, per key: committed writers ordered by CID never overlap
    (first-committer-wins); every read returns the newest committed version
    at or below the reader's RID; every observed version was written by a
    committed transaction (so aborted writes stay invisible).
    """
    txns = [_normalize(e) for e in history]
    committed = [t for t in txns if t["outcome"] == Outcome.COMMITTED.value]
    out: list[Violation] = []

    seen_cids = {}
    for t in committed:
        if not t["writes"] and not t["inserts"]:
            continue
        cid = t["cid"]
        if cid is None or cid <= t["rid"]:
            out.append(Violation("timestamp", t["txn"], f"cid {cid} not above rid {t['rid']}"))
            continue
        if cid in seen_cids:
            out.append(Violation("timestamp", t["txn"], f"cid {cid} reused by txn {seen_cids[cid]}"))
        seen_cids[cid] = t["txn"]

    writers = defaultdict(list)  # (table, key) -> [(cid, rid, txn)]
    for t in committed:
        for tk in t["writes"]:
            writers[tk].append((t["cid"], t["rid"], t["txn"]))
        for tk in t["inserts"]:
            writers[tk].append((t["cid"], t["rid"], t["txn"]))
    for tk, ws in writers.items():
        ws.sort()
        for (c0, _, t0), (c1, r1, t1) in zip(ws, ws[1:]):
            if r1 < c0:
                out.append(Violation("first-committer-wins", t1,
                                     f"{tk[0]}:{tk[1]} also written by concurrent txn {t0} (cid {c0} > rid {r1})"))

    versions = {tk: sorted(c for c, _, _ in ws) for tk, ws in writers.items()}
    for t in txns:
        for table, key, observed in t["reads"]:
            cids = versions.get((table, key), [])
            if observed != INITIAL and observed not in cids:
                out.append(Violation("atomic-visibility", t["txn"],
                                     f"{table}:{key} returned version {observed} with no committed writer"))
                continue
            visible = [c for c in cids if c <= t["rid"]]
            expected = visible[-1] if visible else INITIAL
            if observed != expected:
                out.append(Violation("snapshot-read", t["txn"],
                                     f"{table}:{key} returned {observed}, snapshot {t['rid']} holds {expected}"))
    return out


def si_schedule_exists(history) -> bool:
    """True if some start/commit interleaving explains ``history`` under SI.

    Only committed transactions are considered.  A version is identified by
    its writer's CID; ``0`` is the initial version.  In the sought schedule
    each transaction reads, at its start, the last version committed before
    it, and no two transactions that overlap in time write a common key.
    """
    txns = [_normalize(e) for e in history]
    txns = [t for t in txns if t["outcome"] == Outcome.COMMITTED.value]
    n = len(txns)
    keys = sorted({(tb, k) for t in txns for tb, k, _ in t["reads"]}
                  | {tk for t in txns for tk in t["writes"]})
    index = {tk: i for i, tk in enumerate(keys)}
    reads = [tuple((index[(tb, k)], c) for tb, k, c in t["reads"]) for t in txns]
    writes = [frozenset(index[tk] for tk in t["writes"]) for t in txns]
    versions = [t["cid"] for t in txns]

    failed = set()

    def search(started: int, done: int, last: tuple, dirty: tuple) -> bool:
        if done == (1 << n) - 1:
            return True
        state = (started, done, last, dirty)
        if state in failed:
            return False
        for i in range(n):
            bit = 1 << i
            if not started & bit:
                if all(last[k] == c for k, c in reads[i]):
                    d = list(dirty)
                    d[i] = frozenset()
                    if search(started | bit, done, last, tuple(d)):
                        return True
            elif not done & bit:
                if writes[i] & dirty[i]:
                    continue
                new_last = list(last)
                for k in writes[i]:
                    new_last[k] = versions[i]
                d = list(dirty)
                for j in range(n):
                    if started & (1 << j) and not done & (1 << j) and j != i:
                        d[j] = d[j] | writes[i]
                d[i] = frozenset()
                if search(started, done | bit, tuple(new_last), tuple(d)):
                    return True
        failed.add(state)
        return False

    return search(0, 0, (INITIAL,) * len(keys), (frozenset(),) * n)
