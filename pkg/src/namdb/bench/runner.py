"""Experiment runners producing :class:`RunReport` objects."""

from __future__ import annotations

import math
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .. import costmodel as cm
from ..fabric import Fabric, LatencyModel, Session, Transport
from ..olap import (
    AGG_ALGORITHMS,
    JOIN_ALGORITHMS,
    aggregate_oracle,
    gen_agg_input,
    gen_join_pair,
    nested_loop_join,
)
from ..oltp import (
    Outcome,
    RsiClient,
    TraditionalCluster,
    TransactionAborted,
    check_history,
)
from ..oltp.timing import TimingConfig, simulate
from ..oracle import TimestampOracle
from ..store import GlobalDictionary, Store
from .config import ExperimentConfig
from .workload import decrement_stock, gen_oltp_workload, product_payload

CLIENT_BASE = 100


@dataclass
class RunReport:
    kind: str
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    verdicts: dict[str, bool] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def summary(self) -> str:
        lines = [f"[{self.kind}] seed={self.config.seed}"]
        for row in self.rows:
            lines.append("  " + ", ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
        for name, ok in self.verdicts.items():
            lines.append(f"  check {name}: {'PASS' if ok else 'FAIL'}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def latency_model(cfg: ExperimentConfig) -> LatencyModel:
    return LatencyModel(rdma_cycles=cfg.rdma_cycles,
                        tcp_cycles={Transport.IPOETH: cfg.ipoeth_cycles, Transport.IPOIB: cfg.ipoib_cycles})


# ---------------------------------------------------------------------------
# OLTP


@dataclass
class OltpSetup:
    protocol: str
    transport: Transport
    fabric: Fabric
    clients: list
    server_nodes: tuple[int, ...]
    store: Store | None = None
    oracle: TimestampOracle | None = None
    cluster: TraditionalCluster | None = None


def _capacity(cfg: ExperimentConfig, per_txn: int) -> int:
    return cfg.clients * (math.ceil(cfg.txns * per_txn / cfg.nodes) + 1) + 1


def build_rsi(cfg: ExperimentConfig, num_clients: int | None = None) -> OltpSetup:
    """Storage nodes ``0..nodes-1``, oracle on node ``nodes``, clients from ``CLIENT_BASE``."""
    num_clients = num_clients or cfg.clients
    fabric = Fabric(latency_model(cfg), cfg.clock_hz)
    dictionary = GlobalDictionary(fabric, range(cfg.nodes))
    dictionary.create_table("products", cfg.record_bytes, math.ceil(cfg.products / cfg.nodes))
    dictionary.create_table("orders", cfg.order_bytes, _capacity(cfg, 1))
    dictionary.create_table("orderlines", cfg.order_bytes, _capacity(cfg, 3))
    store = Store(dictionary)
    loader = Session(fabric, CLIENT_BASE - 1, "loader")
    store.load(loader, "products", [product_payload(k, cfg.record_bytes) for k in range(cfg.products)])
    oracle = TimestampOracle(fabric, cfg.nodes, num_clients)
    clients = [RsiClient(store, oracle, c + 1, Session(fabric, CLIENT_BASE + c, f"client{c}"))
               for c in range(num_clients)]
    return OltpSetup("rsi", Transport.RDMA, fabric, clients, tuple(range(cfg.nodes + 1)),
                     store=store, oracle=oracle)


def build_trad(cfg: ExperimentConfig, transport, num_clients: int | None = None) -> OltpSetup:
    """RMs on ``0..nodes-1``, TM on ``nodes``, timestamp server on ``nodes + 1``."""
    num_clients = num_clients or cfg.clients
    transport = Transport.parse(transport)
    fabric = Fabric(latency_model(cfg), cfg.clock_hz)
    cluster = TraditionalCluster(fabric, range(cfg.nodes), cfg.nodes, cfg.nodes + 1, transport)
    cluster.load("products", [product_payload(k, cfg.record_bytes) for k in range(cfg.products)])
    cluster.create_table("orders")
    cluster.create_table("orderlines")
    clients = [cluster.client(c + 1, CLIENT_BASE + c) for c in range(num_clients)]
    return OltpSetup("trad", transport, fabric, clients, tuple(sorted(cluster.server_nodes)),
                     cluster=cluster)


def run_checkout(client, spec):
    """Execute one checkout transaction; returns its descriptor whatever the outcome."""
    txn = client.begin()
    try:
        payloads = [client.read(txn, "products", k) for k in spec.products]
    except TransactionAborted:
        return txn
    for key, payload, qty in zip(spec.products, payloads, spec.quantities):
        client.update(txn, "products", key, decrement_stock(payload, qty))
    client.insert(txn, "orders", spec.order)
    for line in spec.orderlines:
        client.insert(txn, "orderlines", line)
    client.commit(txn)
    return txn


def run_clients(clients, streams, body=run_checkout, switch_interval: float | None = 1e-5,
                max_skew: int | None = 2) -> list:
    """One thread per client, each running its stream closed-loop; returns all descriptors.

    ``max_skew`` bounds how many transactions a client may run ahead of the
    slowest one (``None`` leaves them unconstrained).  The round-robin oracle
    assumes clients progress at similar rates; under the GIL a single thread
    can otherwise run hundreds of transactions while the others sleep.
    """
    results = [[] for _ in clients]
    errors = []
    done = [0] * len(clients)
    gate = threading.Condition()

    def work(i):
        try:
            for n, spec in enumerate(streams[i]):
                if max_skew is not None:
                    with gate:
                        gate.wait_for(lambda: errors or min(done) >= n - max_skew)
                results[i].append(body(clients[i], spec))
                with gate:
                    done[i] += 1
                    gate.notify_all()
        except BaseException as exc:  # surfaced after join
            with gate:
                errors.append(exc)
                done[i] = len(streams[i]) + max_skew + 1 if max_skew is not None else 0
                gate.notify_all()

    old = sys.getswitchinterval()
    if switch_interval:
        sys.setswitchinterval(switch_interval)
    try:
        threads = [threading.Thread(target=work, args=(i,), daemon=True) for i in range(len(clients))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        sys.setswitchinterval(old)
    if errors:
        raise errors[0]
    return [t for r in results for t in r]


def tally_exact(setup: OltpSetup, txns) -> bool:
    """Closed-form verb/message counts hold for every committed writing transaction."""
    for t in txns:
        if t.outcome is not Outcome.COMMITTED or not t.writes:
            continue
        w = len(t.writes)
        if setup.protocol == "rsi":
            ok = (t.tally.cas == w and t.tally.write_signaled == w and t.tally.write_unsignaled == 1
                  and t.tally.fetch_add == len(t.inserts) and t.tally.insert_write == len(t.inserts))
        else:
            n = len(t.participants)
            ok = t.tally.m_r == 2 + 4 * n and t.tally.m_s == 3 + 4 * n
        if not ok:
            return False
    return True


def _oltp_row(cfg: ExperimentConfig, setup: OltpSetup, txns, elapsed: float) -> tuple[dict, dict]:
    committed = [t for t in txns if t.outcome is Outcome.COMMITTED]
    aborted = [t for t in txns if t.outcome is Outcome.ABORTED]
    reasons = {}
    for t in aborted:
        reasons[t.reason.value] = reasons.get(t.reason.value, 0) + 1
    violations = check_history(txns)
    metrics = setup.fabric.metrics
    client_nodes = {CLIENT_BASE + i for i in range(len(setup.clients))}
    snap = metrics.snapshot()
    moved = sum(r["bytes_sent"] + r["bytes_received"] for r in snap if r["node"] in client_nodes)

    def mean(attr):
        return float(np.mean([getattr(t.tally, attr) for t in committed])) if committed else 0.0

    timing = simulate(TimingConfig(protocol=setup.protocol, transport=setup.transport,
                                   clients=cfg.timing_clients, txns_per_client=cfg.timing_txns,
                                   rms=cfg.nodes, payload=cfg.timing_payload,
                                   server_cores=cfg.server_cores, clock_hz=cfg.clock_hz,
                                   seed=cfg.seed, model=latency_model(cfg)))
    row = {
        "protocol": setup.protocol,
        "transport": setup.transport.value,
        "attempted": len(txns),
        "committed": len(committed),
        "aborted": len(aborted),
        "abort_rate": len(aborted) / len(txns) if txns else 0.0,
        "aborts_validation": reasons.get("validation", 0),
        "aborts_snapshot": reasons.get("snapshot_unavailable", 0),
        "aborts_lock": reasons.get("lock_contention", 0),
        "cas_per_txn": mean("cas"),
        "write_signaled_per_txn": mean("write_signaled"),
        "write_unsignaled_per_txn": mean("write_unsignaled"),
        "m_r_per_txn": mean("m_r"),
        "m_s_per_txn": mean("m_s"),
        "server_cycles": metrics.server_cycles(setup.server_nodes),
        "bytes_per_txn": moved / len(txns) if txns else 0.0,
        "history_violations": len(violations),
        "model_mean_latency_us": timing.mean * 1e6,
        "model_p50_latency_us": timing.percentile(50) * 1e6,
        "model_p99_latency_us": timing.percentile(99) * 1e6,
        "model_throughput": timing.throughput,
        "wall_seconds": elapsed,
    }
    label = f"{setup.protocol}/{setup.transport.value}"
    checks = {
        f"{label} history": not violations,
        f"{label} tally": tally_exact(setup, txns),
        f"{label} accounting": len(committed) + len(aborted) == len(txns),
    }
    if setup.protocol == "rsi":
        checks[f"{label} zero storage cycles"] = row["server_cycles"] == 0
    else:
        checks[f"{label} server cycles charged"] = row["server_cycles"] > 0
    return row, checks


def oltp_targets(cfg: ExperimentConfig) -> list[tuple[str, Transport]]:
    protocols = ("rsi", "trad") if cfg.protocol == "all" else (cfg.protocol,)
    out = []
    for proto in protocols:
        if proto == "rsi":
            out.append(("rsi", Transport.RDMA))
        elif proto == "trad":
            transports = list(Transport) if cfg.transport == "all" else [Transport.parse(cfg.transport)]
            out.extend(("trad", t) for t in transports)
        else:
            raise ValueError(f"unknown protocol {proto!r}")
    return out


def run_oltp(cfg: ExperimentConfig) -> RunReport:
    report = RunReport("oltp", cfg)
    streams = [gen_oltp_workload(cfg, c) for c in range(cfg.clients)]
    histories = {}
    for proto, transport in oltp_targets(cfg):
        setup = build_rsi(cfg) if proto == "rsi" else build_trad(cfg, transport)
        start = time.perf_counter()
        txns = run_clients(setup.clients, streams, switch_interval=cfg.switch_interval,
                           max_skew=cfg.max_skew)
        row, checks = _oltp_row(cfg, setup, txns, time.perf_counter() - start)
        report.rows.append(row)
        report.verdicts.update(checks)
        histories[(proto, transport.value)] = txns
    lat = {(r["protocol"], r["transport"]): r["model_mean_latency_us"] for r in report.rows}
    wanted = [("rsi", "rdma"), ("trad", "rdma"), ("trad", "ipoeth"), ("trad", "ipoib")]
    if all(w in lat for w in wanted):
        rsi, t_rdma, t_eth, t_ib = (lat[w] for w in wanted)
        report.verdicts["latency ordering"] = rsi < t_rdma < t_eth <= t_ib
        report.verdicts["rsi 5x below trad/ipoeth"] = t_eth >= 5 * rsi
    report.details["histories"] = histories
    return report


# ---------------------------------------------------------------------------
# OLAP


def _model_cost(algorithm: str, R, S, sel: float, cfg: ExperimentConfig) -> float:
    r = cm.RelationShape(len(R), R.width)
    s = cm.RelationShape(len(S), S.width)
    params = cm.CostParams(epsilon=cfg.epsilon)
    t = Transport.parse(cfg.join_transport)
    if algorithm == "ghj":
        return cm.t_ghj(r, s, t, params)
    if algorithm == "ghj_bloom":
        return cm.t_ghj_bloom(r, s, sel, cfg.epsilon, t, params)
    if algorithm == "rdma_ghj":
        return cm.t_rdma_ghj(r, s, params)
    return cm.t_rrj(r, s, params)


def _selected(cfg: ExperimentConfig, table: dict) -> list[str]:
    if cfg.algorithm == "all":
        return list(table)
    names = [a.strip() for a in cfg.algorithm.split(",")]
    for n in names:
        if n not in table:
            raise ValueError(f"unknown algorithm {n!r}; choose from {sorted(table)}")
    return names


def run_olap_join(cfg: ExperimentConfig) -> RunReport:
    report = RunReport("olap-join", cfg)
    algorithms = _selected(cfg, JOIN_ALGORITHMS)
    model = latency_model(cfg)
    for sel in cfg.selectivity_list:
        R, S = gen_join_pair(cfg.tuples, cfg.tuples, sel, cfg.nodes, cfg.seed)
        oracle = nested_loop_join(R, S) if cfg.tuples <= cfg.oracle_cap else None
        sizes = set()
        for name in algorithms:
            kwargs = {}
            if name in ("ghj", "ghj_bloom"):
                kwargs["transport"] = cfg.join_transport
            if name == "ghj_bloom":
                kwargs["epsilon"] = cfg.epsilon
            start = time.perf_counter()
            res = JOIN_ALGORITHMS[name](R, S, fabric=Fabric(model, cfg.clock_hz), **kwargs)
            elapsed = time.perf_counter() - start
            sizes.add(len(res))
            ok = res.same_as(oracle) if oracle is not None else None
            report.rows.append({
                "sel": sel,
                "algorithm": name,
                "matches": len(res),
                "bytes_shuffled": res.metrics.get("bytes_shuffled", 0),
                "kept_fraction": res.metrics.get("kept_fraction", 1.0),
                "partition_server_cycles": res.metrics.get("partition_server_cycles", 0.0),
                "model_seconds": _model_cost(name, R, S, sel, cfg),
                "wall_seconds": elapsed,
                "oracle_ok": ok,
            })
            if ok is not None:
                report.verdicts[f"sel={sel} {name} oracle"] = ok
        report.verdicts[f"sel={sel} equal cardinality"] = len(sizes) == 1
    return report


def run_olap_agg(cfg: ExperimentConfig) -> RunReport:
    report = RunReport("olap-agg", cfg)
    algorithms = _selected(cfg, AGG_ALGORITHMS)
    model = latency_model(cfg)
    for d in cfg.distinct_list:
        rel = gen_agg_input(cfg.rows, d, cfg.nodes, cfg.seed)
        oracle = aggregate_oracle(rel, cfg.agg_fn) if cfg.rows <= cfg.oracle_cap * 4 else None
        for name in algorithms:
            kwargs = {"fabric": Fabric(model, cfg.clock_hz)}
            if name == "agg_rdma":
                kwargs.update(threads_per_node=cfg.threads_per_node, table_rows=cfg.table_rows)
            else:
                kwargs["transport"] = cfg.join_transport
            start = time.perf_counter()
            res = AGG_ALGORITHMS[name](rel, cfg.agg_fn, **kwargs)
            elapsed = time.perf_counter() - start
            ok = res.same_as(oracle) if oracle is not None else None
            report.rows.append({
                "distinct": d,
                "algorithm": name,
                "groups": len(res),
                "union_rows": res.metrics.get("union_rows", 0),
                "overflow_flushes": res.metrics.get("overflow_flushes", 0),
                "bytes_sent": res.metrics["bytes_sent"],
                "server_cycles": res.metrics["server_cycles"],
                "wall_seconds": elapsed,
                "oracle_ok": ok,
            })
            if ok is not None:
                report.verdicts[f"d={d} {name} oracle"] = ok
    return report


# ---------------------------------------------------------------------------
# cost model


BOUND_TARGETS = {
    "trx_upper_bound_n3": (647_000, 0.01),
    "trx_upper_bound_n4": (634_000, 0.01),
    "bandwidth_bound_10gbe": (218_500, 0.02),
    "bandwidth_bound_rsi": (2_400_000, 0.10),
}


def run_costmodel(cfg: ExperimentConfig) -> RunReport:
    report = RunReport("costmodel", cfg)
    params = cm.CostParams(epsilon=cfg.epsilon)
    report.details["curves"] = cm.cost_curves(params=params)
    for row in cm.regression_bounds(params):
        target, tol = BOUND_TARGETS[row["name"]]
        err = abs(row["value"] - target) / target
        report.rows.append({"name": row["name"], "value": row["value"], "target": target,
                            "rel_error": err, "tolerance": tol})
        report.verdicts[row["name"]] = err <= tol
    for t in Transport:
        x = cm.crossover(t, params)
        report.rows.append({"name": f"crossover_{t.value}", "value": x, "target": "", "rel_error": "",
                            "tolerance": ""})
    report.verdicts["crossover rdma/ipoib in [0.70, 0.85]"] = all(
        0.70 <= cm.crossover(t, params) <= 0.85 for t in (Transport.RDMA, Transport.IPOIB))
    report.verdicts["ipoeth beneficial below >= 0.90"] = cm.beneficial_below(Transport.IPOETH, params) >= 0.90
    return report


RUNNERS = {
    "oltp": run_oltp,
    "olap-join": run_olap_join,
    "olap-agg": run_olap_agg,
    "costmodel": run_costmodel,
}
