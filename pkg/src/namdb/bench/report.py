"""CSV emission and matplotlib figures for run reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .. import costmodel as cm
from .runner import RunReport


def rows_to_csv(rows, header=None) -> str:
    rows = list(rows)
    header = list(header or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def report_csv(report: RunReport) -> str:
    """Main CSV for a report; for the cost model this is the curve table."""
    if report.kind == "costmodel":
        return rows_to_csv(({**r, "sel": f"{r['sel']:.4f}", "cost_seconds": repr(r["cost_seconds"])}
                            for r in report.details["curves"]), cm.CSV_HEADER)
    return rows_to_csv(report.rows)


def sidecar(out: Path, suffix: str, ext: str) -> Path:
    return out.with_name(f"{out.stem}_{suffix}{ext}")


def write_outputs(report: RunReport, out: Path | None, plot: bool = True) -> list[Path]:
    """Write the CSV (and bounds / verdict sidecars and figures) next to ``out``."""
    if out is None:
        return []
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_csv(report))
    written = [out]
    if report.kind == "costmodel":
        path = sidecar(out, "bounds", ".csv")
        path.write_text(rows_to_csv(report.rows))
        written.append(path)
    path = sidecar(out, "checks", ".csv")
    path.write_text(rows_to_csv([{"check": k, "passed": v} for k, v in report.verdicts.items()],
                                ("check", "passed")))
    written.append(path)
    if plot:
        written.extend(render_figures(report, out))
    return written


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_figures(report: RunReport, out: Path) -> list[Path]:
    fn = {"oltp": _plot_oltp, "olap-join": _plot_join, "olap-agg": _plot_agg,
          "costmodel": _plot_costmodel}[report.kind]
    plt = _pyplot()
    fig = fn(plt, report)
    path = sidecar(Path(out), "figure", ".png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def _plot_oltp(plt, report):
    rows = report.rows
    labels = [f"{r['protocol']}\n{r['transport']}" for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.bar(labels, [r["model_mean_latency_us"] for r in rows], color="tab:blue")
    ax1.set_yscale("log")
    ax1.set_ylabel("modeled mean commit latency (us)")
    ax2.bar(labels, [r["model_throughput"] for r in rows], color="tab:orange")
    ax2.set_yscale("log")
    ax2.set_ylabel("modeled throughput (txn/s)")
    fig.suptitle(f"checkout workload, {report.config.timing_clients} modeled clients")
    return fig


def _plot_join(plt, report):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name in dict.fromkeys(r["algorithm"] for r in report.rows):
        mine = [r for r in report.rows if r["algorithm"] == name]
        sels = [r["sel"] for r in mine]
        ax1.plot(sels, [r["model_seconds"] for r in mine], marker="o", label=name)
        ax2.plot(sels, [r["bytes_shuffled"] for r in mine], marker="o", label=name)
    ax1.set_xlabel("selectivity")
    ax1.set_ylabel("modeled cost (s)")
    ax2.set_xlabel("selectivity")
    ax2.set_ylabel("bytes shuffled")
    ax1.legend()
    fig.suptitle(f"|R| = |S| = {report.config.tuples}, {report.config.nodes} nodes")
    return fig


def _plot_agg(plt, report):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name in dict.fromkeys(r["algorithm"] for r in report.rows):
        mine = [r for r in report.rows if r["algorithm"] == name]
        d = [r["distinct"] for r in mine]
        ax1.plot(d, [max(r["bytes_sent"], 1) for r in mine], marker="o", label=name)
        ax2.plot(d, [r["server_cycles"] for r in mine], marker="o", label=name)
    for ax in (ax1, ax2):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("distinct group keys")
    ax1.set_yscale("log")
    ax1.set_ylabel("bytes sent")
    ax2.set_ylabel("server cycles")
    ax1.legend()
    return fig


def _plot_costmodel(plt, report):
    curves = report.details["curves"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for transport in dict.fromkeys(r["transport"] for r in curves):
        plain = {r["sel"]: r["cost_seconds"] for r in curves
                 if r["transport"] == transport and r["algorithm"] == "ghj"}
        bloom = [(r["sel"], r["cost_seconds"] / plain[r["sel"]]) for r in curves
                 if r["transport"] == transport and r["algorithm"] == "ghj_bloom"]
        line, = ax.plot([s for s, _ in bloom], [c for _, c in bloom], label=transport)
        ax.axvline(cm.crossover(transport, cm.CostParams(epsilon=report.config.epsilon)),
                   color=line.get_color(), linestyle=":")
    ax.axhline(1.0, color="grey", linewidth=0.8)
    ax.set_xlabel("effective selectivity")
    ax.set_ylabel("cost with reduction / plain GHJ")
    ax.legend()
    return fig
