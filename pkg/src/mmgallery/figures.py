"""Render evaluation results to PNG files.

Every report-producing CLI path calls into here so that figures land next
to the delimited output. Uses the Agg backend; nothing ever opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import EvalReport, GridResult


def plot_grid_lines(grid: GridResult, path: str | Path) -> Path:
    """Accuracy vs. shots, one line per grid row (swept value or mode)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.2), constrained_layout=True)
    shots = list(grid.shots)
    for row in grid.rows:
        ys = [grid.accuracy(row, k) for k in shots]
        ax.plot(shots, ys, marker="o", label=f"{grid.param}={row}")
    ax.set_xscale("log", base=2)
    ax.set_xticks(shots)
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.set_xlabel("support samples per class")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"accuracy by shots per {grid.param} value")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_grid_bars(grid: GridResult, path: str | Path) -> Path:
    """Row-average accuracy as a bar chart (one bar per grid row)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.2), constrained_layout=True)
    labels = [str(row) for row in grid.rows]
    values = [grid.row_average(row) for row in grid.rows]
    positions = np.arange(len(labels))
    ax.bar(positions, values, color="tab:blue")
    for x, v in zip(positions, values):
        ax.text(x, v, f"{v:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("mean accuracy over shots (%)")
    ax.set_title(f"average accuracy per {grid.param} value")
    ax.grid(True, axis="y", alpha=0.3)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_confusion(
    report: EvalReport, path: str | Path, class_labels: Sequence[str] | None = None
) -> Path:
    """Heatmap of the confusion counts from a single evaluation."""
    path = Path(path)
    if class_labels is None:
        labels = set(report.confusion)
        for row in report.confusion.values():
            labels.update(row)
        class_labels = sorted(labels)
    matrix = np.zeros((len(class_labels), len(class_labels)))
    index = {label: i for i, label in enumerate(class_labels)}
    for true_label, row in report.confusion.items():
        for predicted, count in row.items():
            if predicted in index:
                matrix[index[true_label], index[predicted]] = count
    fig, ax = plt.subplots(
        figsize=(max(4.8, 0.42 * len(class_labels) + 1.5),) * 2,
        constrained_layout=True,
    )
    image = ax.imshow(matrix, cmap="Blues")
    fig.colorbar(image, ax=ax, shrink=0.8, label="count")
    ax.set_xticks(range(len(class_labels)))
    ax.set_yticks(range(len(class_labels)))
    ax.set_xticklabels(class_labels, rotation=90, fontsize=7)
    ax.set_yticklabels(class_labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"confusion ({report.percent:.1f}% accuracy)")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_grid_figures(grid: GridResult, stem: str | Path) -> list[Path]:
    """Write the line and bar charts for a grid next to its CSV."""
    stem = Path(stem)
    return [
        plot_grid_lines(grid, stem.with_name(stem.name + "_lines.png")),
        plot_grid_bars(grid, stem.with_name(stem.name + "_bars.png")),
    ]
