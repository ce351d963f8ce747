"""Acceptance criteria 1-7, one PASS/FAIL line each.

Run alone with ``pytest -m acceptance -s`` or ``python tests/test_acceptance.py``.
"""

import itertools
import math
import time

import numpy as np
import pytest

from namdb import costmodel as cm
from namdb.bench.config import ExperimentConfig
from namdb.bench.runner import build_rsi, build_trad, run_clients
from namdb.bench.workload import gen_oltp_workload
from namdb.fabric import (
    IPOETH_ANCHORS,
    Fabric,
    Transport,
    Verb,
    model_cpu_cycles,
    model_latency,
)
from namdb.olap import (
    AggFn,
    agg_hierarchical,
    agg_rdma,
    aggregate_oracle,
    gen_agg_input,
    gen_join_pair,
    gen_random_pair,
    ghj,
    ghj_bloom,
    nested_loop_join,
    rdma_ghj,
    rrj,
)
from namdb.oltp import Outcome, check_history
from namdb.oltp.timing import simulate

import si_enum

pytestmark = pytest.mark.acceptance

MiB = 1 << 20
KiB = 1 << 10
GiB = 1 << 30

# tolerances
TRX_N3, TRX_N3_TOL = 647_000, 0.01
TRX_N4, TRX_N4_TOL = 634_000, 0.01
BW_10GBE, BW_10GBE_TOL = 218_500, 0.02
RSI_CEILING, RSI_CEILING_TOL = 2_400_000, 0.10
CROSSOVER_RANGE = (0.70, 0.85)
IPOETH_BENEFIT_MIN = 0.90
SI_RUNS, SI_CLIENTS, SI_TXNS, SI_HOT_KEYS = 10, 8, 1000, 100
SI_BUDGET_S = 120.0
JOIN_INSTANCES, JOIN_MAX_TUPLES = 20, 100_000
AGG_DISTINCT = (1, 1 << 4, 1 << 8, 1 << 12, 1 << 16)
OLAP_BUDGET_S = 180.0
SIGNALING_SCHEDULES = 1000
MAX_CONCURRENT_ATOMICS = 4
RSI_SPEEDUP_MIN = 5.0


def _rel(value, target):
    return abs(value - target) / target


# ---------------------------------------------------------------------------
# 1


def test_criterion_1_cost_model_regression(verdict):
    n3 = cm.trx_upper_bound(8, 2.2e9, 3, 3750)
    n4 = cm.trx_upper_bound(8, 2.2e9, 4, 3750)
    bw = cm.bandwidth_bound(1.25 * GiB, 6 * KiB)
    ceiling = cm.bandwidth_bound(13.8e9, 6 * KiB)
    ok = (_rel(n3, TRX_N3) <= TRX_N3_TOL and _rel(n4, TRX_N4) <= TRX_N4_TOL
          and _rel(bw, BW_10GBE) <= BW_10GBE_TOL and _rel(ceiling, RSI_CEILING) <= RSI_CEILING_TOL)
    verdict(1, "cost-model regression", ok,
            f"n=3 {n3:,.0f}, n=4 {n4:,.0f}, 10GbE {bw:,.0f}, RSI ceiling {ceiling:,.0f}")


# ---------------------------------------------------------------------------
# 2


def _grid_crossover(transport):
    """First effective selectivity on the emitted grid where the reduction stops paying off."""
    rows = cm.cost_curves(sels=np.linspace(0, 1, 10_001), transports=[transport])
    plain = {r["sel"]: r["cost_seconds"] for r in rows if r["algorithm"] == "ghj"}
    for r in rows:
        if r["algorithm"] == "ghj_bloom" and r["cost_seconds"] >= plain[r["sel"]]:
            return r["sel"]
    return 1.0


def test_criterion_2_crossover(verdict):
    lo, hi = CROSSOVER_RANGE
    found = {t: cm.crossover(t) for t in (Transport.RDMA, Transport.IPOIB)}
    grid = {t: _grid_crossover(t) for t in found}
    eth = cm.beneficial_below(Transport.IPOETH)
    ok = (all(lo <= x <= hi for x in found.values())
          and all(abs(found[t] - grid[t]) <= 2e-4 for t in found)
          and eth >= IPOETH_BENEFIT_MIN)
    verdict(2, "semi-join crossover", ok,
            f"rdma {found[Transport.RDMA]:.3f}, ipoib {found[Transport.IPOIB]:.3f}, "
            f"ipoeth beneficial below {eth:.3f}")


# ---------------------------------------------------------------------------
# 3


def _trad_counts(transport):
    cfg = ExperimentConfig(nodes=3, clients=1, products=30, record_bytes=64)
    setup = build_trad(cfg, transport, num_clients=1)
    client, metrics = setup.clients[0], setup.fabric.metrics
    servers = setup.cluster.server_nodes
    problems = []
    for n in (1, 2, 3):
        before = (metrics.verb_count(Verb.RECEIVE, servers), metrics.verb_count(Verb.SEND, servers))
        txn = client.begin()
        keys = range(n)  # key k lives on RM k % 3
        for k in keys:
            payload = client.read(txn, "products", k)
            client.update(txn, "products", k, payload)
        client.insert(txn, "orders", bytes(64))
        client.commit(txn)
        after = (metrics.verb_count(Verb.RECEIVE, servers), metrics.verb_count(Verb.SEND, servers))
        begin_msgs = txn.read_tally
        observed = (after[0] - before[0] - begin_msgs.m_r, after[1] - before[1] - begin_msgs.m_s)
        want = (2 + 4 * n, 3 + 4 * n)
        if (txn.outcome is not Outcome.COMMITTED or len(txn.participants) != n
                or (txn.tally.m_r, txn.tally.m_s) != want or observed != want):
            problems.append(f"{transport.value} n={n}: tally {(txn.tally.m_r, txn.tally.m_s)}, "
                            f"fabric {observed}, want {want}")
    return problems


def _rsi_counts():
    cfg = ExperimentConfig(nodes=3, clients=2, products=30, record_bytes=64)
    setup = build_rsi(cfg, num_clients=1)
    client, metrics = setup.clients[0], setup.fabric.metrics
    storage = setup.server_nodes
    problems = []
    for w in (1, 2, 3, 5):
        verbs = lambda v: metrics.verb_count(v, {client.session.node_id})
        before = {v: verbs(v) for v in (Verb.CAS, Verb.WRITE)}
        txn = client.begin()
        for k in range(w):
            client.update(txn, "products", k, client.read(txn, "products", k))
        client.commit(txn)
        t = txn.tally
        delta = {v: verbs(v) - before[v] for v in before}
        if (txn.outcome is not Outcome.COMMITTED or t.cas != w or t.write_signaled != w
                or t.write_unsignaled != 1 or delta[Verb.CAS] != w or delta[Verb.WRITE] != w + 1):
            problems.append(f"rsi W={w}: tally {t}, fabric {delta}")
    cycles = metrics.server_cycles(storage)
    if cycles != 0:
        problems.append(f"rsi charged {cycles} storage cycles")
    return problems


def test_criterion_3_message_counts(verdict):
    problems = []
    for transport in Transport:
        problems += _trad_counts(transport)
    problems += _rsi_counts()
    verdict(3, "message-count exactness", not problems, "; ".join(problems) or
            "trad m_r=2+4n, m_s=3+4n for n=1..3 on every transport; RSI W CAS + W WRITE + 1 unsignaled, 0 storage cycles")


# ---------------------------------------------------------------------------
# 4


def _exhaustive(protocol):
    harness = si_enum.Harness(protocol)
    runs, problems = 0, []
    cases = [(n, si_enum.program_mixes(n, full=True)) for n in (1, 2, 3)]
    cases.append((4, si_enum.program_mixes(4, full=False)))
    for n, mixes in cases:
        orders = si_enum.schedules(n)
        for progs in mixes:
            for schedule in orders:
                found = si_enum.agreement(harness.run(progs, schedule))
                runs += 1
                if found:
                    problems.append(f"{protocol} {progs} {schedule}: {found}")
    return runs, problems


def test_criterion_4_si_correctness(verdict):
    start = time.perf_counter()
    violations = 0
    commits = aborts = 0
    for seed in range(1, SI_RUNS + 1):
        cfg = ExperimentConfig(clients=SI_CLIENTS, txns=SI_TXNS, products=1000, hot_keys=SI_HOT_KEYS,
                               record_bytes=64, seed=seed)
        setup = build_rsi(cfg)
        txns = run_clients(setup.clients, [gen_oltp_workload(cfg, c) for c in range(SI_CLIENTS)],
                           max_skew=cfg.max_skew)
        violations += len(check_history(txns))
        commits += sum(t.outcome is Outcome.COMMITTED for t in txns)
        aborts += sum(t.outcome is Outcome.ABORTED for t in txns)
    randomized = time.perf_counter() - start
    runs, problems = 0, []
    for protocol in ("rsi", "trad"):
        r, p = _exhaustive(protocol)
        runs += r
        problems += p
    elapsed = time.perf_counter() - start
    ok = violations == 0 and not problems and commits + aborts == SI_RUNS * SI_CLIENTS * SI_TXNS \
        and elapsed < SI_BUDGET_S
    verdict(4, "snapshot isolation", ok,
            f"{SI_RUNS} runs, {commits} commits / {aborts} aborts, {violations} violations, "
            f"{runs} exhaustive histories, {len(problems)} disagreements, "
            f"{randomized:.0f}s + {elapsed - randomized:.0f}s")


# ---------------------------------------------------------------------------
# 5


def _join_instances():
    rng = np.random.default_rng(2024)
    yield JOIN_MAX_TUPLES, JOIN_MAX_TUPLES, 4, "unique", 0.5, False, 0
    for i in range(1, JOIN_INSTANCES):
        n_r, n_s = (int(10 ** rng.uniform(2, 5)) for _ in range(2))
        nodes = int(rng.integers(1, 5))
        kind = "unique" if i % 2 else "duplicates"
        yield n_r, n_s, nodes, kind, float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0])), bool(i % 3 == 0), i


def test_criterion_5_oracle_equivalence(verdict):
    start = time.perf_counter()
    bad = []
    shapes = []
    for n_r, n_s, nodes, kind, sel, key_only, seed in _join_instances():
        if kind == "unique":
            R, S = gen_join_pair(n_r, n_s, sel, nodes, seed, key_only)
        else:
            R, S = gen_random_pair(n_r, n_s, max(n_r, n_s), nodes, seed, key_only)
        oracle = nested_loop_join(R, S)
        shapes.append(len(R) + len(S))
        for name, fn in (("ghj", ghj), ("ghj_bloom", ghj_bloom), ("rdma_ghj", rdma_ghj), ("rrj", rrj)):
            if not fn(R, S).same_as(oracle):
                bad.append(f"{name} on |R|={n_r} |S|={n_s} nodes={nodes} {kind}")
    for d in AGG_DISTINCT:
        rel = gen_agg_input(1 << 17, d, nodes=3, seed=d)
        for fn in AggFn:
            oracle = aggregate_oracle(rel, fn)
            for name, op in (("hierarchical", agg_hierarchical), ("rdma", agg_rdma)):
                if not op(rel, fn).same_as(oracle):
                    bad.append(f"agg_{name} {fn.value} d={d}")
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < OLAP_BUDGET_S and max(shapes) == 2 * JOIN_MAX_TUPLES
    verdict(5, "join/aggregation oracle equivalence", ok,
            f"{JOIN_INSTANCES} join instances, {len(AGG_DISTINCT)} distinct counts, "
            f"{len(bad)} mismatches, {elapsed:.0f}s" + (f": {bad[:3]}" if bad else ""))


# ---------------------------------------------------------------------------
# 6


ATOMIC_KINDS = (("fa", 1), ("fa", 2), ("cas", 0, 5), ("cas", 1, 3), ("cas", 3, 1))


def _apply(value, op):
    if op[0] == "fa":
        return value, (value + op[1]) & (2 ** 64 - 1)
    return value, (op[2] if value == op[1] else value)


def _linearizable(ops, results, final):
    for order in itertools.permutations(range(len(ops))):
        value, ok = 0, True
        for i in order:
            old, value = _apply(value, ops[i])
            if old != results[i]:
                ok = False
                break
        if ok and value == final:
            return True
    return False


def _check_atomics():
    fabric = Fabric()
    region = fabric.register_region(1, 8)
    qps = [fabric.connect(10 + i, 1, auto_progress=False) for i in range(MAX_CONCURRENT_ATOMICS)]
    checked = 0
    for k in range(1, MAX_CONCURRENT_ATOMICS + 1):
        for ops in itertools.product(ATOMIC_KINDS, repeat=k):
            for order in itertools.permutations(range(k)):
                region.buf[:] = bytes(8)
                seqs = []
                for qp, op in zip(qps, ops):
                    if op[0] == "fa":
                        seqs.append(qp.post_fetch_add(region.address, op[1]))
                    else:
                        seqs.append(qp.post_cas(region.address, op[1], op[2]))
                for i in order:
                    qps[i].process(1)
                results = [qps[i].wait(seqs[i]).value for i in range(k)]
                final = int.from_bytes(region.bytes, "little")
                if not _linearizable(ops, results, final):
                    return checked, f"{ops} in order {order} gave {results}, final {final}"
                checked += 1
    return checked, None


def _check_signaling():
    rng = np.random.default_rng(7)
    for schedule in range(SIGNALING_SCHEDULES):
        fabric = Fabric()
        nqp = int(rng.integers(1, 4))
        regions = [fabric.register_region(1, 32) for _ in range(nqp)]
        cq = fabric.create_cq()
        qps = [fabric.connect(2, 1, cq=cq, auto_progress=False) for _ in range(nqp)]
        plans = []
        for q in range(nqp):
            plan = []
            for _ in range(int(rng.integers(1, 16))):
                off = int(rng.integers(0, 32))
                length = int(rng.integers(1, 33 - off))
                kind = "read" if rng.random() < 0.2 else "write"
                data = rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()
                plan.append((kind, off, length, data, bool(rng.random() < 0.3)))
            plan[-1] = (*plan[-1][:4], True)
            plans.append(plan)
        # replay[q][j]: region contents after the first j writes of qp q
        replay = []
        for plan in plans:
            state, states = bytearray(32), [bytes(32)]
            for kind, off, length, data, _ in plan:
                if kind == "write":
                    state[off:off + length] = data
                states.append(bytes(state))
            replay.append(states)
        seqs = []
        for q, plan in enumerate(plans):
            s = []
            for kind, off, length, data, signaled in plan:
                addr = regions[q].address + off
                s.append(qps[q].post_read(addr, length, signaled) if kind == "read"
                         else qps[q].post_write(addr, data, signaled))
            seqs.append(s)
        expected = {(qps[q].qp_id, seqs[q][j]) for q, plan in enumerate(plans)
                    for j, step in enumerate(plan) if step[4]}
        seen = set()
        pending = [q for q in range(nqp)]
        while pending or len(cq):
            if pending and (not len(cq) or rng.random() < 0.7):
                q = pending[int(rng.integers(0, len(pending)))]
                if not qps[q].process(1):
                    pending.remove(q)
                continue
            for c in cq.poll(int(rng.integers(1, 4))):
                q = next(i for i, qp in enumerate(qps) if qp.qp_id == c.qp_id)
                j = seqs[q].index(c.seq)
                seen.add((c.qp_id, c.seq))
                current = regions[q].bytes
                # every WQE up to j is visible; later ones may or may not have run yet
                if not any(current == replay[q][m] for m in range(j + 1, len(plans[q]) + 1)):
                    return schedule, f"completion {c.seq} on qp {q} without prior writes visible"
                kind, off, length, _, _ = plans[q][j]
                if kind == "read" and c.result != replay[q][j][off:off + length]:
                    return schedule, f"read {c.seq} on qp {q} returned a stale or future value"
        if seen != expected:
            return schedule, "signaled WQEs and completions differ"
    return SIGNALING_SCHEDULES, None


def _check_anchors():
    want = [
        (model_latency(Transport.RDMA, Verb.WRITE, 8), 1e-6),
        (model_latency(Transport.RDMA, Verb.READ, 8), 2e-6),
        (model_latency(Transport.RDMA, Verb.WRITE, MiB), 161e-6),
        (model_latency(Transport.RDMA, Verb.READ, MiB), 161e-6),
        (model_latency(Transport.IPOIB, Verb.SEND, MiB), 393e-6),
        (model_latency(Transport.IPOIB, Verb.SEND, 8), 20e-6),
        (model_latency(Transport.IPOETH, Verb.SEND, 8), 30e-6),
        (model_latency(Transport.IPOETH, Verb.SEND, MiB), IPOETH_ANCHORS[-1][1]),
        (model_cpu_cycles(Transport.RDMA, 8, "client"), 450),
        (model_cpu_cycles(Transport.RDMA, MiB, "client", Verb.WRITE), 450),
        (model_cpu_cycles(Transport.RDMA, 8, "server", Verb.WRITE), 0),
        (model_cpu_cycles(Transport.IPOETH, 8, "client"), 7544),
        (model_cpu_cycles(Transport.IPOIB, 8, "client"), 13264),
    ]
    return [(got, exp) for got, exp in want if got != exp]


def test_criterion_6_fabric_semantics(verdict):
    atomics, atomic_err = _check_atomics()
    schedules, signal_err = _check_signaling()
    anchor_err = _check_anchors()
    ok = atomic_err is None and signal_err is None and not anchor_err
    verdict(6, "fabric semantics", ok,
            f"{atomics} atomic executions, {schedules} signaling schedules, "
            f"{len(anchor_err)} anchor mismatches"
            + "".join(f"; {e}" for e in (atomic_err, signal_err) if e))


# ---------------------------------------------------------------------------
# 7


def test_criterion_7_latency_ordering(verdict):
    lat = {
        "rsi/rdma": simulate(protocol="rsi", transport="rdma").mean,
        "trad/rdma": simulate(protocol="trad", transport="rdma").mean,
        "trad/ipoeth": simulate(protocol="trad", transport="ipoeth").mean,
        "trad/ipoib": simulate(protocol="trad", transport="ipoib").mean,
    }
    ok = (lat["rsi/rdma"] < lat["trad/rdma"] < lat["trad/ipoeth"] <= lat["trad/ipoib"]
          and lat["trad/ipoeth"] >= RSI_SPEEDUP_MIN * lat["rsi/rdma"])
    verdict(7, "modeled commit-latency ordering", ok,
            ", ".join(f"{k} {v * 1e6:.1f}us" for k, v in lat.items())
            + f", ipoeth/rsi {lat['trad/ipoeth'] / lat['rsi/rdma']:.1f}x")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
