import csv
import io

import pytest

from namdb.bench import cli
from namdb.bench.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config_text
from namdb.bench.runner import build_rsi, build_trad, run_checkout, run_costmodel, run_olap_agg, run_olap_join, run_oltp
from namdb.bench.workload import (
    INITIAL_STOCK,
    ORDERLINES_PER_TXN,
    READS_PER_TXN,
    decrement_stock,
    gen_oltp_workload,
    product_payload,
    workload_bytes,
)
from namdb.fabric import Transport
from namdb.oltp import Outcome

# the latency ordering needs a loaded server, so the timing model keeps 16 clients
SMALL = dict(clients=2, txns=10, products=200, record_bytes=32, timing_clients=16, timing_txns=20)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nclients = 4\ntuples = 1e4\nepsilon=0.2\n")
    cfg = load_config(path, {"clients": "6", "seed": None})
    assert (cfg.clients, cfg.tuples, cfg.epsilon, cfg.seed) == (6, 10_000, 0.2, 0)
    assert load_config(None, None, **parse_config_text(dump_config(cfg))) == cfg


@pytest.mark.parametrize("text", ["clients 4", "bogus = 1", "clients = 0", "epsilon = 1", "hot_keys = -1"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_lists():
    cfg = ExperimentConfig(selectivities="0.1, 0.2", distinct="1,1e3")
    assert cfg.selectivity_list == [0.1, 0.2] and cfg.distinct_list == [1, 1000]


def test_workload_deterministic_and_shaped():
    cfg = ExperimentConfig(txns=50, products=100, order_bytes=64, seed=3)
    a, b = gen_oltp_workload(cfg, 1), gen_oltp_workload(cfg, 1)
    assert a == b and a != gen_oltp_workload(cfg, 2)
    for t in a:
        assert len(set(t.products)) == READS_PER_TXN and len(t.orderlines) == ORDERLINES_PER_TXN
        assert all(0 <= p < 100 for p in t.products)
    assert workload_bytes(a) == workload_bytes(b)
    hot = gen_oltp_workload(ExperimentConfig(products=100, hot_keys=5), 0)
    assert all(p < 5 for t in hot for p in t.products)


def test_bytes_per_txn_at_default_record_size():
    # 1 KiB records: three reads plus three updates move at least 6 KiB per checkout
    cfg = ExperimentConfig(products=30)
    setup = build_rsi(cfg, num_clients=1)
    spec = gen_oltp_workload(cfg, 0, 1)[0]
    txn = run_checkout(setup.clients[0], spec)
    c = setup.fabric.metrics.counters(100)
    assert txn.outcome is Outcome.COMMITTED
    assert c.bytes_received >= 3 * 1024 and c.bytes_sent >= 3 * 1024


def test_stock_helpers():
    p = product_payload(7, 32)
    assert len(p) == 32 and int.from_bytes(p[:8], "little") == INITIAL_STOCK
    assert int.from_bytes(decrement_stock(p, 5)[:8], "little") == INITIAL_STOCK - 5
    assert decrement_stock(bytes(8), 3) == bytes(8)


def test_run_oltp_small():
    cfg = ExperimentConfig(**SMALL, nodes=2)
    report = run_oltp(cfg)
    assert report.passed, report.summary()
    rows = {(r["protocol"], r["transport"]): r for r in report.rows}
    assert len(rows) == 4
    trad = rows[("trad", "ipoeth")]
    # three products over two RMs touch one or both of them
    assert 6 <= trad["m_r_per_txn"] <= 10
    assert rows[("rsi", "rdma")]["server_cycles"] == 0


def test_single_client_commits_everything():
    cfg = ExperimentConfig(**{**SMALL, "clients": 1}, protocol="trad", transport="rdma")
    (row,) = run_oltp(cfg).rows
    assert row["abort_rate"] == 0


def test_bad_protocol():
    with pytest.raises(ValueError):
        run_oltp(ExperimentConfig(**SMALL, protocol="paxos"))


def test_build_trad_layout():
    setup = build_trad(ExperimentConfig(**SMALL), Transport.IPOIB)
    # timestamp server sits on node 4 but is not a counted server
    assert setup.server_nodes == (0, 1, 2, 3)
    assert setup.cluster.server_nodes == frozenset(setup.server_nodes)


def test_olap_runners():
    join = run_olap_join(ExperimentConfig(workload="olap-join", tuples=4000, selectivities="0.5", nodes=2))
    assert join.passed and {r["algorithm"] for r in join.rows} == {"ghj", "ghj_bloom", "rdma_ghj", "rrj"}
    agg = run_olap_agg(ExperimentConfig(workload="olap-agg", rows=5000, distinct="1,100", nodes=2))
    assert agg.passed and len(agg.rows) == 4


def test_costmodel_runner():
    report = run_costmodel(ExperimentConfig(workload="costmodel"))
    assert report.passed
    assert {r["name"] for r in report.rows} >= {"trx_upper_bound_n3", "bandwidth_bound_rsi"}


def test_cli_costmodel_writes_csv_and_png(tmp_path, capsys):
    out = tmp_path / "cm.csv"
    assert cli.main(["costmodel", "--out", str(out), "--quiet"]) == 0
    header = next(csv.reader(io.StringIO(out.read_text())))
    assert header == ["sel", "algorithm", "transport", "cost_seconds"]
    pngs = list(tmp_path.glob("*.png"))
    assert pngs and all(p.stat().st_size > 1000 for p in pngs)
    assert (tmp_path / "cm_bounds.csv").exists() and (tmp_path / "cm_checks.csv").exists()


def test_cli_stdout_and_errors(capsys):
    assert cli.main(["olap-agg", "--rows", "2000", "--distinct", "10", "--nodes", "2"]) == 0
    captured = capsys.readouterr()
    assert captured.out.splitlines()[0].startswith("algorithm") or "," in captured.out.splitlines()[0]
    assert "check" in captured.err
    assert cli.main(["oltp", "--clients", "0"]) == 2
    assert cli.main(["oltp", "--protocol", "paxos", "--quiet"]) == 2


def test_cli_oltp_plot(tmp_path):
    out = tmp_path / "oltp.csv"
    args = ["oltp", "--out", str(out), "--quiet"]
    for k, v in SMALL.items():
        args += ["--" + k.replace("_", "-"), str(v)]
    assert cli.main(args) == 0
    assert list(tmp_path.glob("*.png"))
