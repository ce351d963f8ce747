"""``namdb`` command line: ``oltp``, ``olap-join``, ``olap-agg`` and ``costmodel``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .report import report_csv, write_outputs
from .runner import RUNNERS

_HELP = {
    "oltp": "checkout transactions under RSI and the 2PC baseline",
    "olap-join": "distributed joins over a selectivity grid",
    "olap-agg": "distributed aggregation over a distinct-key sweep",
    "costmodel": "analytic join cost curves and throughput bounds",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="namdb", description="Network-attached memory database simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", type=Path, help="key = value file; flags override it")
        p.add_argument("--out", type=Path, help="CSV path (default: standard output)")
        p.add_argument("--no-plot", action="store_true", help="skip the PNG figure next to --out")
        p.add_argument("--quiet", action="store_true", help="suppress the human-readable summary")
        for f in fields(ExperimentConfig):
            if f.name == "workload":
                continue
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           metavar=f.name.upper(), help=f"default: {f.default}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if f.name != "workload"}
    try:
        cfg = load_config(args.config, overrides, workload=args.command)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"namdb: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        report = RUNNERS[args.command](cfg)
    except ValueError as exc:
        print(f"namdb: {exc}", file=sys.stderr)
        return 2
    if args.out is None:
        sys.stdout.write(report_csv(report))
        text_stream = sys.stderr
    else:
        written = write_outputs(report, args.out, plot=not args.no_plot)
        text_stream = sys.stdout
        if not args.quiet:
            for path in written:
                print(f"wrote {path}", file=text_stream)
    if not args.quiet:
        print(report.summary(), file=text_stream)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
