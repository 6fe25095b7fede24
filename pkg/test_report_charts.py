#!/usr/bin/env python3
"""Report tests: accuracy summaries and SVG rendering"""

import pandas as pd
import pytest

from report_charts import (ReportError, format_summary, load_accuracy_csvs, render_accuracy_svg, render_report,
                           summarize_accuracy)


def accuracy_csv(path, regime, accuracies, objective="kl"):
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"delta": [0.0, 0.1][:len(accuracies)], "objective": objective, "accuracy": accuracies,
                  "failures": 0, "samples": 10, "regime": regime, "run_hash": "h"}).to_csv(path, index=False)
    return path


@pytest.fixture
def runs(tmp_path):
    accuracy_csv(tmp_path / "runs" / "raven_s0" / "accuracy.csv", "raven", [0.9, 0.8])
    accuracy_csv(tmp_path / "runs" / "raven_s1" / "accuracy.csv", "raven", [0.9, 0.6])
    accuracy_csv(tmp_path / "runs" / "vanilla_s0" / "accuracy.csv", "vanilla", [0.95, 0.3])
    return tmp_path / "runs"


class TestSummary:
    def test_mean_and_std_across_runs(self, runs):
        summary = summarize_accuracy(load_accuracy_csvs([runs]))
        row = summary[(summary["regime"] == "raven") & (summary["delta"] == 0.1)].iloc[0]
        assert row["mean"] == pytest.approx(0.7)
        assert row["std"] == pytest.approx(0.1414213, rel=1e-5)
        assert row["runs"] == 2

    def test_single_run_has_zero_std(self, runs):
        summary = summarize_accuracy(load_accuracy_csvs([runs / "vanilla_s0" / "accuracy.csv"]))
        assert (summary["std"] == 0.0).all()
        assert (summary["runs"] == 1).all()

    def test_format(self, runs):
        text = format_summary(summarize_accuracy(load_accuracy_csvs([runs])))
        assert "δ=0.1" in text
        assert "70.00 ± 14.14" in text


class TestLoading:
    def test_missing_columns(self, tmp_path):
        path = tmp_path / "accuracy.csv"
        pd.DataFrame({"delta": [0.1], "accuracy": [0.5]}).to_csv(path, index=False)
        with pytest.raises(ReportError, match="objective"):
            load_accuracy_csvs([path])

    def test_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_accuracy_csvs([tmp_path / "absent.csv"])

    def test_directory_without_results(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_accuracy_csvs([tmp_path])

    def test_no_inputs(self):
        with pytest.raises(ReportError):
            load_accuracy_csvs([])


class TestRender:
    def test_outputs(self, runs, tmp_path):
        outputs = render_report([runs], tmp_path / "report")
        assert set(outputs) == {"summary", "svg_kl"}
        svg = outputs["svg_kl"].read_text()
        assert "<svg" in svg
        assert len(pd.read_csv(outputs["summary"])) == 4

    def test_svg_is_deterministic(self, runs, tmp_path):
        summary = summarize_accuracy(load_accuracy_csvs([runs]))
        first = render_accuracy_svg(summary, "kl", tmp_path / "a.svg")
        second = render_accuracy_svg(summary, "kl", tmp_path / "b.svg")
        assert first.read_bytes() == second.read_bytes()

    def test_unknown_objective(self, runs, tmp_path):
        summary = summarize_accuracy(load_accuracy_csvs([runs]))
        with pytest.raises(ReportError):
            render_accuracy_svg(summary, "w2", tmp_path / "w2.svg")

    def test_one_file_per_objective(self, tmp_path):
        accuracy_csv(tmp_path / "kl.csv", "raven", [0.9, 0.5], objective="kl")
        accuracy_csv(tmp_path / "w2.csv", "raven", [0.9, 0.4], objective="w2")
        outputs = render_report([tmp_path / "kl.csv", tmp_path / "w2.csv"], tmp_path / "report")
        assert set(outputs) == {"summary", "svg_kl", "svg_w2"}
