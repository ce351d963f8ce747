"""Benchmark harness: configs, workloads, runners and reports."""

from .config import ConfigError, ExperimentConfig, load_config
from .runner import RunReport, run_costmodel, run_olap_agg, run_olap_join, run_oltp
from .workload import CheckoutTxn, gen_oltp_workload

__all__ = [
    "CheckoutTxn", "ConfigError", "ExperimentConfig", "RunReport", "gen_oltp_workload", "load_config",
    "run_costmodel", "run_olap_agg", "run_olap_join", "run_oltp",
]
