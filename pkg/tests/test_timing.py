import pytest

from namdb.fabric import Transport
from namdb.oltp.timing import TRAD_DELAYS_TO_NOTIFY, TimingConfig, simulate, trad_unloaded_latency


def _mean(protocol, transport, **kw):
    kw.setdefault("txns_per_client", 40)
    return simulate(protocol=protocol, transport=transport, **kw).mean


def test_loaded_ordering():
    rsi = _mean("rsi", "rdma")
    rdma, eth, ib = (_mean("trad", t) for t in ("rdma", "ipoeth", "ipoib"))
    assert rsi < rdma < eth < ib
    assert eth / rsi >= 5


def test_unloaded_notify_includes_four_delays():
    assert TRAD_DELAYS_TO_NOTIFY == 4
    for t, delay in ((Transport.IPOETH, 30e-6), (Transport.IPOIB, 20e-6)):
        assert trad_unloaded_latency(t) > TRAD_DELAYS_TO_NOTIFY * delay


def test_rsi_needs_rdma():
    with pytest.raises(ValueError):
        TimingConfig(protocol="rsi", transport="ipoeth")
    with pytest.raises(ValueError):
        TimingConfig(protocol="2pc")
    with pytest.raises(ValueError):
        TimingConfig(clients=0)


def test_deterministic_and_shaped():
    a = simulate(protocol="trad", transport="ipoib", clients=4, txns_per_client=10, seed=3)
    b = simulate(protocol="trad", transport="ipoib", clients=4, txns_per_client=10, seed=3)
    assert len(a.commit_latency) == 40
    assert (a.commit_latency == b.commit_latency).all()
    assert a.percentile(50) <= a.percentile(99)
    assert a.throughput > 0


def test_more_cores_help_trad():
    one = _mean("trad", "ipoeth", server_cores=1)
    four = _mean("trad", "ipoeth", server_cores=4)
    assert four < one


def test_config_xor_overrides():
    with pytest.raises(TypeError):
        simulate(TimingConfig(), clients=2)
