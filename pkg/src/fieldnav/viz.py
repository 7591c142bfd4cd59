"""Plots for run logs and planner comparisons.

Figures are built with matplotlib's object API (no pyplot, no global
backend state) and written as SVG.  The data series live in pure
extraction helpers so tests can compare plotted values against the
logged ones without parsing SVG.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np
from matplotlib.figure import Figure

from . import sim
from .baselines import PLANNER_NAMES, ComparisonReport

ERROR_KEYS = ("translation_error", "rotation_error", "velocity_error")


def runlog_series(log: sim.RunLog) -> Dict[str, np.ndarray]:
    """Time series stored in a run log, keyed by record field."""
    series: Dict[str, list] = {"t": []}
    for record in log.records:
        series["t"].append(record["t"])
        for key in ERROR_KEYS + ("goal_distance_truth",):
            if key in record:
                series.setdefault(key, []).append(record[key])
    return {key: np.asarray(values, dtype=float) for key, values in series.items()}


def runlog_paths(log: sim.RunLog) -> Dict[str, np.ndarray]:
    """Truth (and belief, when filtering ran) positions, one row per record."""
    paths: Dict[str, list] = {"truth": []}
    for record in log.records:
        paths["truth"].append(record["truth"]["position"])
        if record.get("belief") is not None:
            paths.setdefault("belief", []).append(record["belief"]["mean"]["position"])
    return {key: np.asarray(values, dtype=float) for key, values in paths.items()}


def runlog_figure(log: sim.RunLog) -> Figure:
    """Error curves over time next to the top-down path."""
    series = runlog_series(log)
    paths = runlog_paths(log)
    fig = Figure(figsize=(10.0, 4.0))
    ax_err, ax_path = fig.subplots(1, 2)

    plotted = False
    for key in ERROR_KEYS:
        if key in series:
            ax_err.plot(series["t"], series[key], label=key.replace("_", " "))
            plotted = True
    if "goal_distance_truth" in series:
        ax_err.plot(
            series["t"], series["goal_distance_truth"],
            linestyle="--", label="goal distance",
        )
        plotted = True
    ax_err.set_xlabel("time [s]")
    ax_err.set_ylabel("error")
    ax_err.set_title(f"status: {log.status}")
    if plotted:
        ax_err.legend(fontsize="small")

    for name, path in paths.items():
        if path.size:
            ax_path.plot(path[:, 0], path[:, 1], marker=".", label=name)
    ax_path.set_xlabel("x [m]")
    ax_path.set_ylabel("y [m]")
    ax_path.set_aspect("equal", adjustable="datalim")
    if paths["truth"].size:
        ax_path.legend(fontsize="small")
    fig.tight_layout()
    return fig


def comparison_summary(report: ComparisonReport) -> Dict[str, Dict[str, float]]:
    """Failure rate and mean finite costs per planner."""
    summary: Dict[str, Dict[str, float]] = {}
    for planner in PLANNER_NAMES:
        rows = [row for row in report.rows if row["planner"] == planner]
        if not rows:
            continue
        collisions = [r["collision_cost"] for r in rows if np.isfinite(r["collision_cost"])]
        efforts = [r["control_cost"] for r in rows if np.isfinite(r["control_cost"])]
        summary[planner] = {
            "failure_rate": float(np.mean([bool(r["failure"]) for r in rows])),
            "mean_collision_cost": float(np.mean(collisions)) if collisions else float("nan"),
            "mean_control_cost": float(np.mean(efforts)) if efforts else float("nan"),
        }
    return summary


def comparison_figure(report: ComparisonReport) -> Figure:
    """Bar panels mirroring the failure-rate / collision / effort comparison."""
    summary = comparison_summary(report)
    planners = [name for name in PLANNER_NAMES if name in summary]
    metrics = ("failure_rate", "mean_collision_cost", "mean_control_cost")
    titles = ("ground-truth failure rate", "mean collision cost", "mean control cost")
    fig = Figure(figsize=(10.0, 3.2))
    axes = fig.subplots(1, 3)
    for ax, metric, title in zip(axes, metrics, titles):
        values = [summary[name][metric] for name in planners]
        ax.bar(range(len(planners)), values)
        ax.set_xticks(range(len(planners)))
        ax.set_xticklabels(planners, fontsize="small")
        ax.set_title(title, fontsize="small")
    fig.tight_layout()
    return fig


def save_figure(fig: Figure, path) -> None:
    fig.savefig(path, format="svg")


def plot_runlog(log: sim.RunLog, path) -> None:
    save_figure(runlog_figure(log), path)


def plot_comparison(report: ComparisonReport, path) -> None:
    save_figure(comparison_figure(report), path)
