#!/usr/bin/env python3
"""
Run artifacts: per-epoch metrics as JSON lines, the final CSV summary, a
JSON run summary and the multi-seed experiment tables. Nothing written here
depends on the clock, so two runs with the same flags and seed produce
identical files.
"""

import csv
import json
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from training import Metrics

CSV_COLUMNS = ["epoch", "task_acc", "concept_acc", "count_mae", "loss_task", "loss_rec", "loss_prior"]
METRICS_FILE = "metrics.jsonl"
CSV_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_jsonl(history: Iterable[Metrics], directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, METRICS_FILE)
    with open(path, "w", encoding="utf-8") as f:
        for metrics in history:
            f.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
    return path


def write_metrics_csv(rows: Iterable[Metrics], directory: str) -> str:
    """One row per metrics record; absent values are left empty."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, CSV_FILE)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for metrics in rows:
            record = metrics.to_dict()
            writer.writerow([_cell(record[c]) for c in CSV_COLUMNS])
    return path


def save_summary(directory: str, command: str, metrics: Optional[Metrics] = None,
                 extra_metadata: Optional[Dict] = None) -> str:
    """
    Write the run summary.

    Args:
        directory: Output directory
        command: CLI command that produced the run
        metrics: Final metrics, if any
        extra_metadata: Additional fields merged into the summary

    Returns:
        Path to saved file
    """
    os.makedirs(directory, exist_ok=True)
    output = {"command": command}
    if metrics is not None:
        output["metrics"] = metrics.to_dict()
    if extra_metadata:
        output.update(extra_metadata)
    path = os.path.join(directory, SUMMARY_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(output, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def print_results_summary(title: str, metrics: Metrics, out_dir: str,
                          baseline: Optional[float] = None):
    """Human-readable recap of a finished train/eval run."""
    print(f"\n✅ {title}:")
    print(f"   📊 Task accuracy: {metrics.task_acc:.4f} over {metrics.n} scenes")
    if metrics.balanced_acc is not None:
        print(f"   ⚖️  Balanced accuracy: {metrics.balanced_acc:.4f}")
    if metrics.concept_acc is not None:
        print(f"   🧩 Concept subset accuracy: {metrics.concept_acc:.4f}")
        print(f"   🔢 Count MAE: {metrics.count_mae:.4f}")
    if baseline is not None:
        print(f"   📉 Majority-label baseline: {baseline:.4f}")
    print(f"   💾 Artifacts saved to: {out_dir}")


EXPERIMENT_COLUMNS = ["config", "seed", "task_acc", "balanced_acc", "concept_acc", "count_mae",
                      "baseline", "best_epoch"]
MEDIAN_COLUMNS = ["config", "runs", "task_acc", "balanced_acc", "concept_acc", "count_mae",
                  "baseline"]
RUNS_FILE = "runs.csv"
MEDIANS_FILE = "medians.csv"


def experiment_medians(runs: Sequence[Dict]) -> List[Dict]:
    """
    Median of every metric over the seeds of each configuration.

    Configurations keep the order of their first run. Missing values are
    skipped, and a metric missing from every run stays None.
    """
    grouped: Dict[str, List[Dict]] = {}
    for run in runs:
        grouped.setdefault(run["config"], []).append(run)
    medians = []
    for name, group in grouped.items():
        row = {"config": name, "runs": len(group)}
        for column in MEDIAN_COLUMNS[2:]:
            values = [run[column] for run in group if run.get(column) is not None]
            row[column] = float(np.median(values)) if values else None
        medians.append(row)
    return medians


def write_experiment_tables(runs: Sequence[Dict], directory: str) -> Tuple[str, str]:
    """Write `runs.csv` (one row per config and seed) and `medians.csv`; returns both paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, columns, rows in ((RUNS_FILE, EXPERIMENT_COLUMNS, runs),
                                (MEDIANS_FILE, MEDIAN_COLUMNS, experiment_medians(runs))):
        path = os.path.join(directory, name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(row.get(c)) for c in columns])
        paths.append(path)
    return paths[0], paths[1]


def print_experiment_medians(medians: Sequence[Dict], out_dir: str):
    print("\n✅ Experiments finished (medians over seeds):")
    for row in medians:
        concept = "n/a" if row["concept_acc"] is None else f"{row['concept_acc']:.4f}"
        mae = "n/a" if row["count_mae"] is None else f"{row['count_mae']:.4f}"
        print(f"   📊 {row['config']} ({row['runs']} runs): task {row['task_acc']:.4f}, "
              f"concept {concept}, count MAE {mae}, baseline {row['baseline']:.4f}")
    print(f"   💾 Tables saved to: {out_dir}")
