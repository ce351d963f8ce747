"""Closed-form cost and throughput models for joins and distributed commit.

All costs are in seconds, sizes in tuples, widths in bytes per tuple.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .fabric import Transport

GiB = 1 << 30
KiB = 1 << 10

# seconds per byte at the saturation bandwidth of each transport
C_NET = {
    Transport.RDMA: 1.47e-10,
    Transport.IPOIB: 2.86e-10,
    Transport.IPOETH: 8e-9,
}


@dataclass(frozen=True)
class CostParams:
    c_mem: float = 1e-9
    c_net: dict = field(default_factory=lambda: dict(C_NET))
    cycles_m: float = 3750
    cycles_c: float = 2.2e9
    cores: int = 8
    epsilon: float = 0.1

    def __post_init__(self):
        values = [self.c_mem, self.cycles_m, self.cycles_c, self.cores, self.epsilon, *self.c_net.values()]
        if any(v <= 0 for v in values):
            raise ValueError("cost parameters must be strictly positive")

    def net(self, transport) -> float:
        return self.c_net[Transport.parse(transport)]

    def with_net(self, transport, c_net: float) -> "CostParams":
        table = dict(self.c_net)
        table[Transport.parse(transport)] = c_net
        return replace(self, c_net=table)


DEFAULT_PARAMS = CostParams()


@dataclass(frozen=True)
class RelationShape:
    tuples: int
    width: int = 8

    def __post_init__(self):
        if self.tuples < 0 or self.width <= 0:
            raise ValueError("shape needs a non-negative cardinality and a positive width")

    @property
    def bytes(self) -> float:
        return float(self.tuples) * self.width


def t_mem(shape: RelationShape, params: CostParams = DEFAULT_PARAMS) -> float:
    return shape.bytes * params.c_mem


def t_net(shape: RelationShape, transport=Transport.IPOETH, params: CostParams = DEFAULT_PARAMS) -> float:
    return shape.bytes * params.net(transport)


def t_part(shape: RelationShape, transport=Transport.IPOETH, params: CostParams = DEFAULT_PARAMS) -> float:
    """Read at the sender, move over the network, materialize at the receiver."""
    return shape.bytes * (2 * params.c_mem + params.net(transport))


def t_join_local(r: RelationShape, s: RelationShape, params: CostParams = DEFAULT_PARAMS) -> float:
    """Two radix phases, each touching both inputs once."""
    return 2 * params.c_mem * (r.bytes + s.bytes)


def t_ghj(r: RelationShape, s: RelationShape, transport=Transport.IPOETH,
          params: CostParams = DEFAULT_PARAMS) -> float:
    return (r.bytes + s.bytes) * (4 * params.c_mem + params.net(transport))


def effective_selectivity(sel: float, epsilon: float) -> float:
    return min(1.0, sel + epsilon)


def t_ghj_bloom(r: RelationShape, s: RelationShape, sel: float, epsilon: float | None = None,
                transport=Transport.IPOETH, params: CostParams = DEFAULT_PARAMS) -> float:
    """GHJ after a semi-join reduction, with ``sel_eff = min(1, sel + epsilon)``."""
    if not 0.0 <= sel <= 1.0:
        raise ValueError("selectivity must lie in [0, 1]")
    eps = params.epsilon if epsilon is None else epsilon
    return t_ghj_bloom_eff(r, s, effective_selectivity(sel, eps), transport, params)


def t_ghj_bloom_eff(r: RelationShape, s: RelationShape, sel_eff: float, transport=Transport.IPOETH,
                    params: CostParams = DEFAULT_PARAMS) -> float:
    c_mem, c_net = params.c_mem, params.net(transport)
    return (r.bytes + s.bytes) * (c_mem + 4 * sel_eff * c_mem + sel_eff * c_net)


def t_rdma_ghj(r: RelationShape, s: RelationShape, params: CostParams = DEFAULT_PARAMS) -> float:
    """Partitioning costs only the sender's memory scan; the NIC does the rest."""
    return t_mem(r, params) + t_mem(s, params) + t_join_local(r, s, params)


def t_rrj(r: RelationShape, s: RelationShape, params: CostParams = DEFAULT_PARAMS) -> float:
    return 2 * params.c_mem * (r.bytes + s.bytes)


def crossover(transport=Transport.IPOETH, params: CostParams = DEFAULT_PARAMS) -> float:
    """Effective selectivity at which the reduced and plain GHJ cost the same."""
    c_mem, c_net = params.c_mem, params.net(transport)
    return (3 * c_mem + c_net) / (4 * c_mem + c_net)


def conflict_probability(lam: float, t: float, n_records: int) -> float:
    """Likelihood that a transaction touching ``n_records`` hits a conflict."""
    if n_records < 1:
        raise ValueError("n_records must be at least 1")
    if lam < 0 or t < 0:
        raise ValueError("arrival rate and service time must be non-negative")
    p = 6 * lam * t
    if p >= 1:
        raise ValueError(f"6*lambda*t = {p:g} is outside the model's domain (< 1)")
    return 1 - (1 - p) ** n_records


def messages_per_txn(n_nodes: int) -> tuple[int, int]:
    """Server-side (received, sent) messages for a transaction over ``n_nodes`` RMs."""
    return 2 + 4 * n_nodes, 3 + 4 * n_nodes


def trx_upper_bound(cores: int, cycles_c: float, n_nodes: int, cycles_m: float) -> float:
    """Optimistic throughput when message handling is the only CPU work."""
    if min(cores, cycles_c, n_nodes, cycles_m) <= 0:
        raise ValueError("all arguments must be positive")
    m_r, m_s = messages_per_txn(n_nodes)
    return cores * cycles_c * (n_nodes + 1) / ((m_r + m_s) * cycles_m)


def bandwidth_bound(bandwidth_bytes_per_s: float, bytes_per_txn: float) -> float:
    if bandwidth_bytes_per_s <= 0 or bytes_per_txn <= 0:
        raise ValueError("bandwidth and bytes per transaction must be positive")
    return bandwidth_bytes_per_s / bytes_per_txn


def regression_bounds(params: CostParams = DEFAULT_PARAMS) -> list[dict]:
    """The headline throughput bounds as labelled rows."""
    rows = []
    for n in (3, 4):
        rows.append({"name": f"trx_upper_bound_n{n}",
                     "value": trx_upper_bound(params.cores, params.cycles_c, n, params.cycles_m)})
    rows.append({"name": "bandwidth_bound_10gbe", "value": bandwidth_bound(1.25 * GiB, 6 * KiB)})
    rows.append({"name": "bandwidth_bound_rsi", "value": bandwidth_bound(13.8e9, 6 * KiB)})
    return rows


ALGORITHMS = ("ghj", "ghj_bloom", "rdma_ghj", "rrj")
CSV_HEADER = ("sel", "algorithm", "transport", "cost_seconds")


def cost_curves(sels=None, r: RelationShape | None = None, s: RelationShape | None = None,
                transports=tuple(Transport), params: CostParams = DEFAULT_PARAMS,
                effective: bool = True) -> list[dict]:
    """Every join cost over a selectivity grid, one row per (sel, algorithm, transport).

    With ``effective=True`` the grid is read as effective selectivity, which is
    what the crossover is stated in; otherwise the Bloom error is added first.
    """
    sels = np.round(np.linspace(0.0, 1.0, 101), 10) if sels is None else np.asarray(sels, float)
    r = r or RelationShape(1_000_000, 8)
    s = s or RelationShape(1_000_000, 8)
    rows = []
    for transport in transports:
        transport = Transport.parse(transport)
        for sel in sels:
            sel = float(sel)
            bloom = (t_ghj_bloom_eff(r, s, sel, transport, params) if effective
                     else t_ghj_bloom(r, s, sel, None, transport, params))
            costs = {
                "ghj": t_ghj(r, s, transport, params),
                "ghj_bloom": bloom,
                "rdma_ghj": t_rdma_ghj(r, s, params),
                "rrj": t_rrj(r, s, params),
            }
            for name in ALGORITHMS:
                rows.append({"sel": sel, "algorithm": name, "transport": transport.value,
                             "cost_seconds": costs[name]})
    return rows


def emit_cost_curves(out=None, **kwargs) -> str:
    """Write :func:`cost_curves` as CSV to ``out`` (path or file object); returns the text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in cost_curves(**kwargs):
        writer.writerow({**row, "sel": f"{row['sel']:.4f}", "cost_seconds": repr(row["cost_seconds"])})
    text = buf.getvalue()
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            fh.write(text)
    elif out is not None:
        out.write(text)
    return text


def beneficial_below(transport=Transport.IPOETH, params: CostParams = DEFAULT_PARAMS,
                     sels=None) -> float:
    """Largest grid selectivity up to which the reduction is cheaper at every grid point."""
    sels = np.linspace(0.0, 1.0, 10_001) if sels is None else np.asarray(sels, float)
    r = s = RelationShape(1_000_000, 8)
    plain = t_ghj(r, s, transport, params)
    best = 0.0
    for sel in sels:
        if t_ghj_bloom_eff(r, s, float(sel), transport, params) < plain:
            best = float(sel)
        else:
            break
    return best
