"""Experiment report serialization: JSON + CSV + fixed-width table + figures.

``write_report`` emits four artifacts under one directory:

    report.json   machine-readable, round-trips through ``load_report``
    report.csv    one delimited row per run
    report.txt    human-readable table (Max / Min / Median / Avg columns)
    figures/      accuracy_per_run.png and selection_curves.png
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import DataError
from .harness import ExperimentReport, RunResult


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "selection_partition": report.selection_partition,
        "report_partition": report.report_partition,
        "epochs": report.epochs,
        "learning_rate": report.learning_rate,
        "k_steps": report.k_steps,
        "hidden_size": report.hidden_size,
        "aggregates": {
            "max": report.max_accuracy,
            "min": report.min_accuracy,
            "median": report.median_accuracy,
            "avg": report.avg_accuracy,
        },
        "runs": [
            {
                "run_index": r.run_index,
                "seed": r.seed,
                "selected_epoch": r.selected_epoch,
                "selection_accuracy": r.selection_accuracy,
                "report_accuracy": r.report_accuracy,
                "epoch_selection_accuracies": r.epoch_selection_accuracies,
                "epoch_losses": r.epoch_losses,
                "wall_time_s": r.wall_time_s,
            }
            for r in report.runs
        ],
    }


def report_from_dict(raw: dict) -> ExperimentReport:
    if not raw.get("runs"):
        raise DataError("report has no runs")
    runs = [
        RunResult(
            run_index=r["run_index"],
            seed=r["seed"],
            selected_epoch=r["selected_epoch"],
            selection_accuracy=r["selection_accuracy"],
            report_accuracy=r["report_accuracy"],
            epoch_selection_accuracies=list(r["epoch_selection_accuracies"]),
            epoch_losses=list(r["epoch_losses"]),
            wall_time_s=r["wall_time_s"],
        )
        for r in raw["runs"]
    ]
    agg = raw["aggregates"]
    return ExperimentReport(
        runs=runs,
        max_accuracy=agg["max"],
        min_accuracy=agg["min"],
        median_accuracy=agg["median"],
        avg_accuracy=agg["avg"],
        selection_partition=raw["selection_partition"],
        report_partition=raw["report_partition"],
        epochs=raw["epochs"],
        learning_rate=raw["learning_rate"],
        k_steps=raw["k_steps"],
        hidden_size=raw["hidden_size"],
    )


def load_report(path: str | Path) -> ExperimentReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def render_table(report: ExperimentReport) -> str:
    lines = [
        f"report partition: {report.report_partition}   "
        f"selection: best epoch on '{report.selection_partition}'",
        f"runs: {len(report.runs)}   epochs: {report.epochs}   "
        f"lr: {report.learning_rate:g}   k: {report.k_steps}   "
        f"hidden: {report.hidden_size}",
        "",
        f"{'run':>4} {'seed':>6} {'sel_epoch':>9} {'sel_acc':>8} {'rep_acc':>8} {'wall_s':>8}",
    ]
    for r in report.runs:
        lines.append(
            f"{r.run_index:>4} {r.seed:>6} {r.selected_epoch:>9} "
            f"{r.selection_accuracy:>8.4f} {r.report_accuracy:>8.4f} "
            f"{r.wall_time_s:>8.1f}"
        )
    lines += [
        "",
        f"{'Max':>8} {'Min':>8} {'Median':>8} {'Avg':>8}",
        f"{report.max_accuracy:>8.4f} {report.min_accuracy:>8.4f} "
        f"{report.median_accuracy:>8.4f} {report.avg_accuracy:>8.4f}",
        "",
    ]
    return "\n".join(lines)


def _write_figures(report: ExperimentReport, fig_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    idx = [r.run_index for r in report.runs]
    accs = [r.report_accuracy for r in report.runs]
    ax.bar(idx, accs, color="#4878d0")
    ax.axhline(report.avg_accuracy, color="#d65f5f", linestyle="--", label="avg")
    ax.axhline(report.min_accuracy, color="#6acc64", linestyle=":", label="min")
    ax.set_xlabel("run")
    ax.set_ylabel(f"accuracy ({report.report_partition})")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("Per-run accuracy at the selected epoch")
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = fig_dir / "accuracy_per_run.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for r in report.runs:
        epochs = range(1, len(r.epoch_selection_accuracies) + 1)
        ax.plot(epochs, r.epoch_selection_accuracies, alpha=0.6, label=f"run {r.run_index}")
        ax.plot(r.selected_epoch, r.epoch_selection_accuracies[r.selected_epoch - 1],
                "k*", markersize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"accuracy ({report.selection_partition})")
    ax.set_title("Selection-partition accuracy per epoch (star = selected)")
    if len(report.runs) <= 10:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = fig_dir / "selection_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def write_report(report: ExperimentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write all report artifacts; returns the paths keyed by kind."""
    if not report.runs:
        raise DataError("refusing to write a report with no runs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report_to_dict(report), indent=2) + "\n")

    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["run_index", "seed", "selected_epoch", "selection_accuracy",
             "report_accuracy", "wall_time_s"]
        )
        for r in report.runs:
            writer.writerow(
                [r.run_index, r.seed, r.selected_epoch,
                 repr(r.selection_accuracy), repr(r.report_accuracy),
                 repr(r.wall_time_s)]
            )

    txt_path = out_dir / "report.txt"
    txt_path.write_text(render_table(report))

    figures = _write_figures(report, out_dir / "figures")
    return {
        "json": json_path,
        "csv": csv_path,
        "table": txt_path,
        "figures": figures[0].parent,
    }
