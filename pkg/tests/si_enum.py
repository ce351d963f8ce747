"""Exhaustive small-history driver: every program mix and start/commit interleaving."""

from __future__ import annotations

import itertools

from namdb.bench.config import ExperimentConfig
from namdb.bench.runner import build_rsi, build_trad
from namdb.fabric import Transport
from namdb.oltp.traditional import Row, TimestampServer
from namdb.oltp import Outcome, TransactionAborted, check_history, si_schedule_exists

TABLE = "products"
PAYLOAD_BYTES = 16


def programs(keys: int = 2, read_only: bool = True):
    """(read set, write set) pairs with the write set inside the read set."""
    out = []
    for r in range(1, keys + 1):
        for reads in itertools.combinations(range(keys), r):
            for w in range(len(reads) + 1):
                for writes in itertools.combinations(reads, w):
                    if writes or read_only:
                        out.append((reads, writes))
    return out


def swap_keys(progs):
    flip = lambda ks: tuple(sorted(1 - k for k in ks))
    return tuple((flip(r), flip(w)) for r, w in progs)


def program_mixes(n: int, full: bool = True):
    """Program tuples for ``n`` txns over 2 keys, one representative per key relabeling.

    ``full`` uses every program; otherwise only updaters that write all they read.
    """
    pool = programs() if full else [(r, w) for r, w in programs() if r == w]
    return [p for p in itertools.product(pool, repeat=n) if p <= swap_keys(p)]


def schedules(n: int):
    """Event sequences where txn i starts before txn i+1 and commits after its own start."""
    def walk(started, done, acc):
        if started == n and len(done) == n:
            yield tuple(acc)
            return
        if started < n:
            yield from walk(started + 1, done, acc + [("start", started)])
        for i in range(started):
            if i not in done:
                yield from walk(started, done | {i}, acc + [("commit", i)])
    return list(walk(0, frozenset(), []))


class Harness:
    """One reusable deployment, reset cheaply between runs."""

    def __init__(self, protocol: str, keys: int = 2):
        cfg = ExperimentConfig(nodes=2, clients=1, txns=1, products=keys, record_bytes=PAYLOAD_BYTES,
                               timing_txns=1)
        self.protocol = protocol
        self.keys = keys
        self.cfg = cfg
        self._fresh()

    def _fresh(self):
        if self.protocol == "rsi":
            self.setup = build_rsi(self.cfg, num_clients=1)
        else:
            self.setup = build_trad(self.cfg, Transport.RDMA, num_clients=1)
        self.client = self.setup.clients[0]
        self._snapshot = self._capture()

    def _capture(self):
        if self.protocol == "rsi":
            return [(r, bytes(r.buf)) for n in range(self.cfg.nodes + 1)
                    for r in self.setup.fabric.regions(n)]
        return [{k: (row.cid, row.payload) for k, row in rm.rows.items()} for rm in self.setup.cluster.rms]

    def reset(self):
        if self.protocol == "rsi":
            for region, data in self._snapshot:
                region.buf[:] = data
            oracle = self.setup.oracle
            oracle._issued = [0]
            oracle._shadow = [bytearray(oracle.stripe_bytes)]
        else:
            cluster = self.setup.cluster
            for rm, rows in zip(cluster.rms, self._snapshot):
                rm.rows = {k: Row(cid, payload) for k, (cid, payload) in rows.items()}
            cluster.ts = TimestampServer()

    def run(self, progs, schedule):
        self.reset()
        client = self.client
        txns = [None] * len(progs)
        for event, i in schedule:
            reads, writes = progs[i]
            if event == "start":
                t = client.begin()
                txns[i] = t
                try:
                    for k in reads:
                        client.read(t, TABLE, k)
                except TransactionAborted:
                    continue
                for k in writes:
                    client.update(t, TABLE, k, bytes([i + 1]) * PAYLOAD_BYTES)
            elif txns[i].active:
                client.commit(txns[i])
        return txns


def agreement(txns) -> list[str]:
    """Problems found when comparing protocol outcomes with the brute-force validator."""
    problems = []
    records = [t.to_record() for t in txns]
    committed = [r for r in records if r["outcome"] == Outcome.COMMITTED.value]
    if check_history(records):
        problems.append("history checker rejected the run")
    if not si_schedule_exists(committed):
        problems.append("validator rejects the committed set")
    for r in records:
        if r["outcome"] == Outcome.ABORTED.value:
            forced = dict(r, outcome=Outcome.COMMITTED.value)
            if si_schedule_exists(committed + [forced]):
                problems.append(f"txn {r['txn']} aborted although an SI schedule admits it")
    return problems
