#!/usr/bin/env python3
"""
Robustness Report Charts
========================
Accuracy-versus-budget curves and mean ± std tables from evaluate CSVs.

Input: one or more accuracy.csv files (columns delta, objective, accuracy,
regime, run_hash), one file per trained model and seed. Directories are
searched recursively for accuracy.csv.

Output:
- accuracy_<objective>.svg : one line per regime, attack budget on the
  horizontal axis, probe accuracy on the vertical axis
- accuracy_summary.csv     : mean, std and run count per (regime, objective, delta)

The rendering is a pure function of the input rows: no timestamps and a
fixed SVG hash salt, so identical CSVs give byte-identical files.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

from tensor_core import RavenError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("delta", "objective", "accuracy", "regime")
SUMMARY_FILE = "accuracy_summary.csv"

plt.rcParams["figure.figsize"] = (8, 5)
plt.rcParams["figure.dpi"] = 100
plt.rcParams["font.size"] = 10
plt.rcParams["axes.titlesize"] = 13
plt.rcParams["axes.labelsize"] = 11
plt.rcParams["svg.hashsalt"] = "raven-report"

# Regime palette
COLORS = {
    "vanilla": "#D62828",
    "noise_vae": "#F77F00",
    "raven": "#2E86AB",
    "raven_gmm": "#06D6A0",
}
MARKERS = {"vanilla": "o", "noise_vae": "s", "raven": "^", "raven_gmm": "D"}
REGIME_ORDER = ("vanilla", "noise_vae", "raven", "raven_gmm")
OBJECTIVE_LABELS = {"kl": "KL attack", "w2": "W2 attack"}


class ReportError(RavenError):
    pass


def _expand(inputs: Iterable[Union[str, Path]]) -> List[Path]:
    paths: List[Path] = []
    for item in inputs:
        item = Path(item)
        if item.is_dir():
            found = sorted(item.rglob("accuracy.csv"))
            if not found:
                raise FileNotFoundError(f"no accuracy.csv under {item}")
            paths.extend(found)
        elif item.is_file():
            paths.append(item)
        else:
            raise FileNotFoundError(f"report input not found: {item}")
    return paths


def load_accuracy_csvs(inputs: Iterable[Union[str, Path]]) -> pd.DataFrame:
    """Concatenate evaluate CSVs, checking the required columns"""
    paths = _expand(inputs)
    if not paths:
        raise ReportError("report needs at least one accuracy CSV")
    frames = []
    for path in paths:
        frame = pd.read_csv(path)
        missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
        if missing:
            raise ReportError(f"{path} lacks columns: {', '.join(missing)}")
        frame["source"] = str(path)
        frames.append(frame)
    combined = pd.concat(frames, ignore_index=True)
    logger.info("loaded %d accuracy rows from %d files", len(combined), len(paths))
    return combined


def summarize_accuracy(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean ± std of accuracy across runs per (regime, objective, delta)

    A single run reports std 0.
    """
    summary = (frame.groupby(["regime", "objective", "delta"], sort=True)["accuracy"]
               .agg(mean="mean", std="std", runs="count")
               .reset_index())
    summary["std"] = summary["std"].fillna(0.0)
    return summary


def _regimes(summary: pd.DataFrame) -> List[str]:
    present = list(summary["regime"].unique())
    known = [r for r in REGIME_ORDER if r in present]
    return known + sorted(r for r in present if r not in REGIME_ORDER)


def render_accuracy_svg(summary: pd.DataFrame, objective: str, path: Union[str, Path]) -> Path:
    """One mean curve per regime (shaded ± std) for a single attack objective"""
    subset = summary[summary["objective"] == objective]
    if subset.empty:
        raise ReportError(f"no rows for objective {objective!r}")

    fig, ax = plt.subplots()
    for regime in _regimes(subset):
        rows = subset[subset["regime"] == regime].sort_values("delta")
        color = COLORS.get(regime, "#023E8A")
        ax.plot(rows["delta"], rows["mean"] * 100.0, marker=MARKERS.get(regime, "o"),
                color=color, linewidth=2, label=regime)
        if (rows["runs"] > 1).any():
            ax.fill_between(rows["delta"], (rows["mean"] - rows["std"]) * 100.0,
                            (rows["mean"] + rows["std"]) * 100.0, color=color, alpha=0.15)

    ax.set_xlabel("Attack budget δ (ℓ∞)")
    ax.set_ylabel("Probe accuracy (%)")
    ax.set_title(f"Accuracy under {OBJECTIVE_LABELS.get(objective, objective)}", fontweight="bold")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")

    plt.tight_layout()
    path = Path(path)
    plt.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def format_summary(summary: pd.DataFrame) -> str:
    """Plain-text table: one row per (regime, objective), one column per delta"""
    cells = summary.assign(cell=[f"{100 * m:.2f} ± {100 * s:.2f}"
                                 for m, s in zip(summary["mean"], summary["std"])])
    table = cells.pivot_table(index=["regime", "objective"], columns="delta", values="cell", aggfunc="first")
    table.columns = [f"δ={d:g}" for d in table.columns]
    return table.to_string()


def render_report(inputs: Iterable[Union[str, Path]], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Summary CSV plus one SVG per attack objective

    Returns:
        Mapping of output name ("summary", "svg_kl", ...) to path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize_accuracy(load_accuracy_csvs(inputs))

    outputs = {"summary": out_dir / SUMMARY_FILE}
    summary.to_csv(outputs["summary"], index=False)
    for objective in sorted(summary["objective"].unique()):
        outputs[f"svg_{objective}"] = render_accuracy_svg(summary, objective,
                                                          out_dir / f"accuracy_{objective}.svg")
    logger.info("report written to %s (%d files)", out_dir, len(outputs))
    return outputs
