"""Experiment configuration: ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    workload: str = "oltp"
    seed: int = 0

    # oltp
    protocol: str = "all"  # rsi | trad | all
    transport: str = "all"  # rdma | ipoib | ipoeth | all (trad only)
    nodes: int = 3
    clients: int = 8
    txns: int = 200  # per client
    products: int = 10_000
    record_bytes: int = 1024
    order_bytes: int = 64
    hot_keys: int = 0  # 0 = uniform over all products
    switch_interval: float = 1e-5
    max_skew: int = 2  # transactions a client may run ahead of the slowest
    timing_clients: int = 16
    timing_txns: int = 200
    timing_payload: int = 64
    server_cores: int = 1

    # olap
    algorithm: str = "all"
    tuples: int = 100_000
    selectivities: str = "0.25,0.5,0.75,1.0"
    epsilon: float = 0.1
    join_transport: str = "ipoeth"
    distinct: str = "1,16,256,4096,65536"
    rows: int = 1 << 17
    agg_fn: str = "sum"
    threads_per_node: int = 2
    table_rows: int = 4096
    oracle_cap: int = 100_000

    # latency-model overrides
    rdma_cycles: int = 450
    ipoeth_cycles: int = 7544
    ipoib_cycles: int = 13264
    clock_hz: float = 2.2e9

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("nodes", "clients", "txns", "products", "record_bytes", "order_bytes", "tuples",
                    "rows", "timing_clients", "timing_txns", "timing_payload", "server_cores",
                    "threads_per_node", "table_rows", "rdma_cycles", "ipoeth_cycles", "ipoib_cycles")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hot_keys < 0 or self.hot_keys > self.products:
            raise ConfigError("hot_keys must lie in [0, products]")
        if self.max_skew < 0:
            raise ConfigError("max_skew must be non-negative")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.record_bytes < 8:
            raise ConfigError("record_bytes must hold the 8-byte stock counter")

    @property
    def selectivity_list(self) -> list[float]:
        return [float(x) for x in _split(self.selectivities)]

    @property
    def distinct_list(self) -> list[int]:
        return [int(float(x)) for x in _split(self.distinct)]

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _split(value: str) -> list[str]:
    return [x.strip() for x in str(value).split(",") if x.strip()]


def _coerce(name: str, raw, kind):
    if raw is None:
        return None
    if kind in ("int", int):
        return int(float(raw)) if isinstance(raw, str) else int(raw)
    if kind in ("float", float):
        return float(raw)
    return str(raw).strip()


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, _TYPES[key])
    return out


def load_config(path=None, overrides: dict | None = None, **defaults) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values = dict(defaults)
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value, _TYPES[key])
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
