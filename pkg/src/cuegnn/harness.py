"""Repeated-run experiment protocol with per-epoch selection and reporting.

Each run r trains a fresh model with seed ``base_seed + r`` for the
configured number of epochs, evaluating the selection partition after every
epoch. The checkpoint of the best selection epoch is then evaluated once on
the report partition. Per-run accuracies are aggregated into max / min /
median / average. The report partition is never touched during selection;
an internal evaluation log is asserted against before the final evaluation.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import Dataset
from .errors import DataError
from .model import ModelParams, init_params
from .training import AdamState, TrainConfig, epoch_rng, evaluate, train_epoch

DEFAULT_RUNS = 10

SELECTION_PARTITIONS = ("val", "train")
REPORT_PARTITIONS = ("test", "val")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    runs: int = DEFAULT_RUNS
    selection_partition: str = "val"  # best-validation-epoch vs best-train-epoch rule
    report_partition: str = "test"

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.selection_partition not in SELECTION_PARTITIONS:
            raise ValueError(
                f"selection_partition must be one of {SELECTION_PARTITIONS}"
            )
        if self.report_partition not in REPORT_PARTITIONS:
            raise ValueError(f"report_partition must be one of {REPORT_PARTITIONS}")
        if self.selection_partition == self.report_partition:
            raise ValueError("selection and report partitions must differ")


@dataclass
class RunResult:
    run_index: int
    seed: int
    selected_epoch: int  # 1-based
    selection_accuracy: float
    report_accuracy: float
    epoch_selection_accuracies: list[float]
    epoch_losses: list[float]
    wall_time_s: float


@dataclass
class ExperimentReport:
    runs: list[RunResult]
    max_accuracy: float
    min_accuracy: float
    median_accuracy: float
    avg_accuracy: float
    selection_partition: str
    report_partition: str
    epochs: int
    learning_rate: float
    k_steps: int
    hidden_size: int

    @classmethod
    def from_runs(cls, runs: list[RunResult], config: ExperimentConfig) -> "ExperimentReport":
        if not runs:
            raise ValueError("a report needs at least one run")
        accs = [r.report_accuracy for r in runs]
        return cls(
            runs=runs,
            max_accuracy=max(accs),
            min_accuracy=min(accs),
            # even run counts take the midpoint of the two central values
            median_accuracy=float(statistics.median(accs)),
            avg_accuracy=sum(accs) / len(accs),
            selection_partition=config.selection_partition,
            report_partition=config.report_partition,
            epochs=config.train.epochs,
            learning_rate=config.train.learning_rate,
            k_steps=config.train.k_steps,
            hidden_size=config.train.hidden_size,
        )


def run_experiment(
    dataset: Dataset,
    config: ExperimentConfig,
    checkpoint_dir: Optional[str | Path] = None,
    threads: int = 1,
) -> ExperimentReport:
    """Execute the full protocol on an in-memory dataset.

    With ``checkpoint_dir`` set, every epoch's checkpoint is written under
    ``<dir>/run_<r>/`` and pruned to the selected epoch after the run;
    otherwise epoch snapshots are held in memory.
    """
    for part in (config.selection_partition, config.report_partition, "train"):
        if part not in dataset.partitions:
            raise DataError(f"dataset is missing required partition '{part}'")
    manifest = dataset.manifest
    train_samples = dataset.partition("train")
    selection_samples = dataset.partition(config.selection_partition)
    report_samples = dataset.partition(config.report_partition)

    results: list[RunResult] = []
    for run_index in range(config.runs):
        seed = config.train.seed + run_index
        started = time.perf_counter()
        params = init_params(
            manifest.cues,
            hidden_size=config.train.hidden_size,
            n_classes=manifest.n_classes,
            seed=seed,
            k_steps=config.train.k_steps,
        )
        state = AdamState.for_params(params, learning_rate=config.train.learning_rate)
        eval_log: list[tuple[int, str]] = []
        epoch_accuracies: list[float] = []
        epoch_losses: list[float] = []
        snapshots: list[ModelParams | Path] = []
        run_dir = None
        if checkpoint_dir is not None:
            run_dir = Path(checkpoint_dir) / f"run_{run_index:02d}"
            run_dir.mkdir(parents=True, exist_ok=True)

        for epoch in range(1, config.train.epochs + 1):
            mean_loss = train_epoch(
                train_samples, params, state, config.train, epoch_rng(seed, epoch)
            )
            acc = evaluate(selection_samples, params, threads=threads).accuracy
            eval_log.append((epoch, config.selection_partition))
            epoch_accuracies.append(acc)
            epoch_losses.append(mean_loss)
            if run_dir is not None:
                from .checkpoint import Checkpoint, save_checkpoint

                path = run_dir / f"epoch_{epoch:03d}.ckpt"
                save_checkpoint(
                    Checkpoint(
                        classes=manifest.classes,
                        params=params,
                        epochs_completed=epoch,
                        train_seed=seed,
                    ),
                    path,
                )
                snapshots.append(path)
            else:
                snapshots.append(params.copy())

        # Highest selection accuracy wins; ties go to the earliest epoch.
        best_epoch = max(
            range(1, config.train.epochs + 1),
            key=lambda e: (epoch_accuracies[e - 1], -e),
        )
        assert all(part != config.report_partition for _, part in eval_log), (
            "report partition was evaluated during selection"
        )
        selected = snapshots[best_epoch - 1]
        if isinstance(selected, Path):
            from .checkpoint import load_checkpoint

            best_params = load_checkpoint(selected).params
            for snap in snapshots:
                if snap != selected:
                    snap.unlink()
        else:
            best_params = selected
        report_acc = evaluate(report_samples, best_params, threads=threads).accuracy
        results.append(
            RunResult(
                run_index=run_index,
                seed=seed,
                selected_epoch=best_epoch,
                selection_accuracy=epoch_accuracies[best_epoch - 1],
                report_accuracy=report_acc,
                epoch_selection_accuracies=epoch_accuracies,
                epoch_losses=epoch_losses,
                wall_time_s=time.perf_counter() - started,
            )
        )
    return ExperimentReport.from_runs(results, config)
