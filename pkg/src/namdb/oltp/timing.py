"""Discrete-event model of commit latency for both protocols.

The functional protocols execute verbs instantly; this module replays their
message pattern against the latency/cycle tables to obtain modeled times.
Server nodes (TM and RMs) own a small pool of cores that serve message
handling in FIFO order, so CPU-heavy transports saturate the coordinator
under load.  Clients run closed-loop on private CPUs.  The timestamp server
is co-located with the TM and answers without network or CPU cost.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import simpy

from ..fabric import DEFAULT_MODEL, LatencyModel, Transport, Verb
from ..store import block_size

HEADER_BYTES = struct.calcsize("<BQqI")
ENTRY_BYTES = struct.calcsize("<BqqI")

# one-way delays on the traditional commit path
TRAD_DELAYS_TO_NOTIFY = 4  # request, prepare, vote, notify
TRAD_DELAYS_TO_VISIBLE = 6  # ... commit, ack


@dataclass
class TimingConfig:
    protocol: str = "rsi"
    transport: Transport = Transport.RDMA
    clients: int = 16
    txns_per_client: int = 200
    rms: int = 3
    reads: int = 3
    updates: int = 3
    inserts: int = 4
    payload: int = 64
    server_cores: int = 1
    clock_hz: float = 2.2e9
    seed: int = 0
    model: LatencyModel = field(default_factory=lambda: DEFAULT_MODEL)

    def __post_init__(self):
        self.transport = Transport.parse(self.transport)
        if self.protocol not in ("rsi", "trad"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "rsi" and self.transport is not Transport.RDMA:
            raise ValueError("RSI needs one-sided verbs, i.e. the RDMA transport")
        if min(self.clients, self.txns_per_client, self.rms, self.server_cores) < 1:
            raise ValueError("counts must be positive")


@dataclass
class TimingResult:
    config: TimingConfig
    commit_latency: np.ndarray
    makespan: float

    @property
    def mean(self) -> float:
        return float(self.commit_latency.mean())

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.commit_latency, q))

    @property
    def throughput(self) -> float:
        return len(self.commit_latency) / self.makespan if self.makespan > 0 else float("inf")


class _Sim:
    def __init__(self, cfg: TimingConfig):
        self.cfg = cfg
        self.env = simpy.Environment()
        self.rng = np.random.default_rng(cfg.seed)
        self.tm = simpy.Resource(self.env, capacity=cfg.server_cores)
        self.rm = [simpy.Resource(self.env, capacity=cfg.server_cores) for _ in range(cfg.rms)]
        self.latencies: list[float] = []

    def _seconds(self, cycles: float) -> float:
        return cycles / self.cfg.clock_hz

    def cpu(self, resource, cycles: float):
        if resource is None:
            yield self.env.timeout(self._seconds(cycles))
            return
        with resource.request() as req:
            yield req
            yield self.env.timeout(self._seconds(cycles))

    def message(self, src, dst, size: int):
        m, t = self.cfg.model, self.cfg.transport
        yield from self.cpu(src, m.cycles(t, size, "client", Verb.SEND))
        yield self.env.timeout(m.latency(t, Verb.SEND, size))
        yield from self.cpu(dst, m.cycles(t, size, "server", Verb.RECEIVE))

    def rpc(self, src, dst, size: int, reply: int):
        yield from self.message(src, dst, size)
        yield from self.message(dst, src, reply)

    # -- traditional ----------------------------------------------------------

    def trad_txn(self):
        cfg = self.cfg
        rec = ENTRY_BYTES + cfg.payload
        keys = self.rng.integers(0, 1 << 30, size=cfg.reads)
        # read phase: RID from the TM-side timestamp server, then RM reads
        yield from self.rpc(None, self.tm, HEADER_BYTES, HEADER_BYTES)
        for k in keys:
            yield from self.rpc(None, self.rm[k % cfg.rms], HEADER_BYTES + ENTRY_BYTES, HEADER_BYTES + rec)
        updates = keys[: cfg.updates]
        per_rm: dict[int, list] = {}
        for k in updates:
            per_rm.setdefault(int(k % cfg.rms), [0, 0])[0] += 1
        order = sorted(per_rm) or [int(self.rng.integers(cfg.rms))]
        for i in range(cfg.inserts):
            per_rm.setdefault(order[i % len(order)], [0, 0])[1] += 1

        start = self.env.now
        yield from self.message(None, self.tm, HEADER_BYTES + (cfg.updates + cfg.inserts) * rec)
        env = self.env
        prepares = [env.process(self.rpc(self.tm, self.rm[i], HEADER_BYTES + u * ENTRY_BYTES, HEADER_BYTES))
                    for i, (u, _) in per_rm.items()]
        yield simpy.AllOf(env, prepares)
        notify = env.process(self.message(self.tm, None, HEADER_BYTES))
        for i, (u, ins) in per_rm.items():
            env.process(self.rpc(self.tm, self.rm[i], HEADER_BYTES + (u + ins) * rec,
                                 HEADER_BYTES + ins * ENTRY_BYTES))
        yield notify
        self.latencies.append(env.now - start)

    # -- RSI --------------------------------------------------------------------

    def one_sided_batch(self, verbs):
        """Post ``verbs`` back to back and wait for the slowest completion."""
        m = self.cfg.model
        post = sum(m.cycles(Transport.RDMA, size, "client", verb) for verb, size in verbs)
        yield self.env.timeout(self._seconds(post))
        yield self.env.timeout(max(m.latency(Transport.RDMA, verb, size) for verb, size in verbs))

    def rsi_txn(self):
        cfg = self.cfg
        block = block_size(cfg.payload)
        oracle_bytes = -(-(-(-60_000 // cfg.clients)) // 8) * cfg.clients
        yield from self.one_sided_batch([(Verb.READ, oracle_bytes)])
        for _ in range(cfg.reads):
            yield from self.one_sided_batch([(Verb.READ, block)])
        start = self.env.now
        # validate+lock and reserve insert slots, then install+unlock
        yield from self.one_sided_batch([(Verb.CAS, 8)] * cfg.updates + [(Verb.FETCH_ADD, 8)] * cfg.inserts)
        yield from self.one_sided_batch([(Verb.WRITE, block)] * (cfg.updates + cfg.inserts))
        # unsignaled publication: the client only pays the posting cost
        yield self.env.timeout(self._seconds(cfg.model.cycles(Transport.RDMA, 1, "client", Verb.WRITE)))
        self.latencies.append(self.env.now - start)

    def client(self):
        txn = self.trad_txn if self.cfg.protocol == "trad" else self.rsi_txn
        for _ in range(self.cfg.txns_per_client):
            yield from txn()

    def run(self) -> TimingResult:
        for _ in range(self.cfg.clients):
            self.env.process(self.client())
        self.env.run()
        return TimingResult(self.cfg, np.asarray(self.latencies), self.env.now)


def simulate(config: TimingConfig | None = None, **overrides) -> TimingResult:
    """Run the closed-loop model and return per-transaction commit latencies."""
    cfg = config or TimingConfig(**overrides)
    if config is not None and overrides:
        raise TypeError("pass either a config or keyword overrides")
    return _Sim(cfg).run()


def trad_unloaded_latency(transport, payload: int = 64, updates: int = 3, inserts: int = 4,
                          model: LatencyModel = DEFAULT_MODEL, clock_hz: float = 2.2e9) -> float:
    """Commit-to-notify time with no queueing: four one-way delays plus handling cycles."""
    res = simulate(protocol="trad", transport=transport, clients=1, txns_per_client=1, rms=1,
                   payload=payload, updates=updates, inserts=inserts, model=model, clock_hz=clock_hz)
    return res.mean
