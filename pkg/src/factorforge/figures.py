"""Report figures, rendered headless to PNG files next to the CSV output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluators import AggregateReport


def render_trajectory_figure(
    rows: Sequence[tuple[int, float, float]], path: str | Path
) -> None:
    """Plot cumulative success rate and mean correlation over completed tasks."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows:
        steps = [row[0] for row in rows]
        ax.plot(steps, [row[1] for row in rows], marker="o", label="success rate")
        ax.plot(steps, [row[2] for row in rows], marker="s", label="mean correlation")
        ax.legend(loc="lower right")
    ax.set_xlabel("completed task results")
    ax.set_ylabel("cumulative value")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Run trajectory")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metrics_figure(report: AggregateReport, path: str | Path) -> None:
    """Grouped per-task bars for execution, format, and correlation averages."""
    factors = list(report.per_factor)
    fig, ax = plt.subplots(figsize=(max(7, 1.4 * len(factors) + 2), 4))
    width = 0.27
    positions = list(range(len(factors)))
    exec_vals = [m.avg_exec for m in factors]
    format_vals = [m.avg_format for m in factors]
    corr_vals = [m.avg_corr if m.avg_corr is not None else 0.0 for m in factors]
    ax.bar([p - width for p in positions], exec_vals, width, label="avg execution")
    ax.bar(positions, format_vals, width, label="avg format")
    ax.bar([p + width for p in positions], corr_vals, width, label="avg correlation")
    ax.set_xticks(positions)
    ax.set_xticklabels([m.task_id for m in factors], rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Per-task metrics")
    ax.legend(loc="upper right")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
