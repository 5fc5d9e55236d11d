#!/usr/bin/env python3
"""
Unit tests for run artifacts: metrics files, CSV summary and run summary.
"""

import pytest
import csv
import json
import os
import sys
from unittest.mock import patch
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from reporting import (
    CSV_COLUMNS, EXPERIMENT_COLUMNS, MEDIAN_COLUMNS, experiment_medians, print_experiment_medians,
    print_results_summary, save_summary, write_experiment_tables, write_metrics_csv,
    write_metrics_jsonl,
)
from training import Metrics


@pytest.fixture
def history():
    return [
        Metrics(task_acc=0.25, epoch=0, n=8),
        Metrics(task_acc=0.5, loss_task=1.5, loss_rec=20.0, loss_prior=3.0, epoch=1, n=8),
        Metrics(task_acc=0.625, concept_acc=0.5, count_mae=0.25, balanced_acc=0.6, n=8),
    ]


class TestMetricsFiles:
    """Test cases for metrics.jsonl and metrics.csv."""

    def test_jsonl_has_one_record_per_line(self, history, tmp_path):
        """Every metrics record is one JSON line."""
        path = write_metrics_jsonl(history, str(tmp_path))

        with open(path) as f:
            records = [json.loads(line) for line in f]

        assert os.path.basename(path) == "metrics.jsonl"
        assert [r["epoch"] for r in records] == [0, 1, None]
        assert records[1]["loss_rec"] == 20.0

    def test_csv_columns_and_empty_cells(self, history, tmp_path):
        """The CSV has the fixed columns; missing values stay empty."""
        path = write_metrics_csv(history, str(tmp_path))

        with open(path, newline="") as f:
            rows = list(csv.reader(f))

        assert rows[0] == CSV_COLUMNS
        assert rows[0] == ["epoch", "task_acc", "concept_acc", "count_mae", "loss_task",
                           "loss_rec", "loss_prior"]
        assert rows[1] == ["0", "0.25", "", "", "", "", ""]
        assert rows[3][0] == ""
        assert rows[3][2] == "0.5"

    def test_files_are_reproducible(self, history, tmp_path):
        """Writing the same history twice gives identical bytes."""
        first = write_metrics_csv(history, str(tmp_path / "a"))
        second = write_metrics_csv(history, str(tmp_path / "b"))

        with open(first, "rb") as a, open(second, "rb") as b:
            assert a.read() == b.read()


class TestSummary:
    """Test cases for summary.json and the console recap."""

    def test_save_summary(self, history, tmp_path):
        """The summary carries the command, final metrics and extra fields."""
        path = save_summary(str(tmp_path), "train", history[-1], {"seed": 7})

        with open(path) as f:
            summary = json.load(f)

        assert summary["command"] == "train"
        assert summary["metrics"]["task_acc"] == 0.625
        assert summary["seed"] == 7

    def test_print_results_summary(self, history):
        """The recap prints accuracy, concepts and baseline."""
        with patch("builtins.print") as mock_print:
            print_results_summary("Evaluation finished", history[-1], "runs/x", baseline=0.3)

        printed = "\n".join(call[0][0] for call in mock_print.call_args_list)
        assert "Task accuracy: 0.6250" in printed
        assert "Count MAE: 0.2500" in printed
        assert "baseline: 0.3000" in printed
        assert "runs/x" in printed


class TestExperimentTables:
    """Test cases for the multi-seed runs and medians tables."""

    @pytest.fixture
    def runs(self):
        return [
            {"config": "iid", "seed": 0, "task_acc": 0.9, "balanced_acc": 0.8, "concept_acc": 0.5,
             "count_mae": 0.4, "baseline": 0.3, "best_epoch": 10},
            {"config": "iid", "seed": 1, "task_acc": 1.0, "balanced_acc": 0.9, "concept_acc": 0.7,
             "count_mae": 0.2, "baseline": 0.3, "best_epoch": 12},
            {"config": "iid", "seed": 2, "task_acc": 0.95, "balanced_acc": 0.85,
             "concept_acc": 0.65, "count_mae": 0.3, "baseline": 0.3, "best_epoch": 9},
            {"config": "extrapolation", "seed": 0, "task_acc": 0.2, "balanced_acc": 0.1,
             "concept_acc": None, "count_mae": None, "baseline": 0.16, "best_epoch": 3},
        ]

    def test_medians_per_config_in_first_seen_order(self, runs):
        medians = experiment_medians(runs)

        assert [m["config"] for m in medians] == ["iid", "extrapolation"]
        assert medians[0]["runs"] == 3
        assert medians[0]["task_acc"] == pytest.approx(0.95)
        assert medians[0]["concept_acc"] == pytest.approx(0.65)
        assert medians[0]["count_mae"] == pytest.approx(0.3)
        assert medians[1]["concept_acc"] is None

    def test_tables_on_disk(self, runs, tmp_path):
        """runs.csv has every run; medians.csv leaves absent medians empty."""
        runs_path, medians_path = write_experiment_tables(runs, str(tmp_path))

        with open(runs_path, newline="") as f:
            run_rows = list(csv.reader(f))
        with open(medians_path, newline="") as f:
            median_rows = list(csv.reader(f))

        assert run_rows[0] == EXPERIMENT_COLUMNS
        assert len(run_rows) == 5
        assert run_rows[4][4] == ""
        assert median_rows[0] == MEDIAN_COLUMNS
        assert median_rows[2][:2] == ["extrapolation", "1"]
        assert median_rows[2][4] == ""

    def test_print_medians(self, runs):
        with patch("builtins.print") as mock_print:
            print_experiment_medians(experiment_medians(runs), "runs/exp")

        printed = "\n".join(call[0][0] for call in mock_print.call_args_list)
        assert "iid (3 runs): task 0.9500, concept 0.6500" in printed
        assert "concept n/a" in printed


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
