"""Aggregate several training runs into median and interquartile curves.

Runs are grouped by method label (from each run's ``manifest.json``).  Each
run's metrics are carried forward onto the union of all evaluation points of
its group: at step ``s`` a run contributes its latest row with
``env_steps <= s`` and is left out before its first row.  Percentiles use
linear interpolation between order statistics.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .training import read_metrics

SUMMARY_SCHEMA = "mmdmix-summary/1"
SUMMARY_COLUMNS = ("method", "metric", "env_steps", "n_runs", "median", "p25", "p75")
DEFAULT_METRICS = ("eval_success_rate", "eval_return_mean")


@dataclass
class Run:
    path: Path
    label: str
    seed: int
    metrics: dict[str, np.ndarray]


@dataclass
class Curve:
    method: str
    metric: str
    env_steps: np.ndarray
    n_runs: np.ndarray
    median: np.ndarray
    p25: np.ndarray
    p75: np.ndarray


def load_run(path) -> Run:
    path = Path(path)
    manifest_path, metrics_path = path / "manifest.json", path / "metrics.csv"
    if not manifest_path.is_file() or not metrics_path.is_file():
        raise ConfigError(f"{path}: not a run directory (needs manifest.json and metrics.csv)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    metrics = read_metrics(metrics_path)
    return Run(path, manifest["label"], int(manifest["seed"]), metrics)


def carry_forward(steps: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Latest value at or before each grid point; NaN before the first recorded step."""
    idx = np.searchsorted(steps, grid, side="right") - 1
    out = np.full(grid.shape, np.nan)
    ok = idx >= 0
    out[ok] = values[idx[ok]]
    return out


def aggregate(runs: list[Run], metrics=DEFAULT_METRICS) -> list[Curve]:
    if not runs:
        raise ConfigError("summarize needs at least one run directory")
    groups: dict[str, list[Run]] = {}
    for run in runs:
        groups.setdefault(run.label, []).append(run)
    curves = []
    for label in sorted(groups):
        members = groups[label]
        grid = np.unique(np.concatenate([r.metrics["env_steps"] for r in members]))
        for metric in metrics:
            table = np.stack([carry_forward(r.metrics["env_steps"], r.metrics[metric], grid) for r in members])
            counts = np.sum(~np.isnan(table), axis=0)
            med, lo, hi = (np.nanpercentile(table, q, axis=0, method="linear") for q in (50, 25, 75))
            curves.append(Curve(label, metric, grid, counts, med, lo, hi))
    return curves


def format_summary(curves: list[Curve]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for c in curves:
        for i, step in enumerate(c.env_steps):
            writer.writerow([c.method, c.metric, int(step), int(c.n_runs[i]), repr(float(c.median[i])),
                             repr(float(c.p25[i])), repr(float(c.p75[i]))])
    return buf.getvalue()


def format_table(curves: list[Curve]) -> str:
    """Final-point digest, one line per (method, metric)."""
    lines = [f"{'method':<12} {'metric':<20} {'env_steps':>9} {'runs':>4} {'median':>9} {'p25':>9} {'p75':>9}"]
    for c in curves:
        lines.append(f"{c.method:<12} {c.metric:<20} {int(c.env_steps[-1]):>9} {int(c.n_runs[-1]):>4} "
                     f"{c.median[-1]:>9.3f} {c.p25[-1]:>9.3f} {c.p75[-1]:>9.3f}")
    return "\n".join(lines)


def plot_curves(curves: list[Curve], path) -> Path:
    """One panel per metric: median line with the 25-75 percentile band shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = list(dict.fromkeys(c.metric for c in curves))
    fig, axes = plt.subplots(1, len(metrics), figsize=(5.5 * len(metrics), 4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for c in (c for c in curves if c.metric == metric):
            (line,) = ax.plot(c.env_steps, c.median, label=c.method)
            ax.fill_between(c.env_steps, c.p25, c.p75, color=line.get_color(), alpha=0.25, linewidth=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def summarize(run_dirs, out_dir, metrics=DEFAULT_METRICS, figure: bool = True) -> list[Curve]:
    """Write ``summary.csv``, ``summary.json`` and ``summary.png`` into ``out_dir``; returns the curves."""
    runs = [load_run(d) for d in run_dirs]
    curves = aggregate(runs, metrics)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(format_summary(curves), encoding="utf-8")
    index = {
        "schema": SUMMARY_SCHEMA,
        "percentile_method": "linear",
        "runs": [{"path": str(r.path), "label": r.label, "seed": r.seed} for r in runs],
    }
    (out / "summary.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    if figure:
        plot_curves(curves, out / "summary.png")
    return curves
