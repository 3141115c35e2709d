"""Render training curves and evaluation grids to PNG files.

Pure file output: the Agg backend is forced before pyplot is imported,
so these work in headless runs and never open a window.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .retrieval import RECALL_KS, EvalReport
from .training import TrainRecord


def save_training_figure(records: list[TrainRecord], path) -> Path:
    """Loss curves (total plus each pair term) and the temperature track."""
    path = Path(path)
    steps = [r.step for r in records]
    fig, (ax_loss, ax_tau) = plt.subplots(
        2, 1, figsize=(7.0, 6.0), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    ax_loss.plot(steps, [r.total for r in records], color="black",
                 linewidth=1.8, label="total")
    pair_names = list(records[0].pairs) if records else []
    for name in pair_names:
        ax_loss.plot(steps, [r.pairs[name] for r in records],
                     linewidth=1.0, alpha=0.8, label=name)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8, loc="upper right")
    ax_loss.grid(alpha=0.3)
    ax_tau.plot(steps, [r.temperature for r in records], color="tab:red", linewidth=1.2)
    ax_tau.set_ylabel("temperature")
    ax_tau.set_xlabel("step")
    ax_tau.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_eval_figure(report: EvalReport, path) -> Path:
    """Recall vs query weight (line), or a recall@1 heatmap for 2-D grids."""
    path = Path(path)
    index_weights = sorted({c.index_weight for c in report.cells})
    query_weights = sorted({c.query_weight for c in report.cells})
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    if len(index_weights) > 1 and len(query_weights) > 1:
        grid = np.full((len(index_weights), len(query_weights)), np.nan)
        for c in report.cells:
            grid[index_weights.index(c.index_weight),
                 query_weights.index(c.query_weight)] = c.recall[1]
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis",
                       extent=(min(query_weights), max(query_weights),
                               min(index_weights), max(index_weights)))
        fig.colorbar(im, ax=ax, label="recall@1")
        ax.plot(report.best.query_weight, report.best.index_weight, "r*",
                markersize=14, label="best")
        ax.set_xlabel("query image weight")
        ax.set_ylabel("index image weight")
        ax.legend(loc="best", fontsize=8)
    elif len(query_weights) > 1:
        for k in RECALL_KS:
            ax.plot(query_weights,
                    [c.recall[k] for c in sorted(report.cells,
                                                 key=lambda c: c.query_weight)],
                    marker="o", markersize=3, label=f"recall@{k}")
        ax.axvline(report.best.query_weight, color="red", linewidth=0.8,
                   linestyle="--", label=f"best w={report.best.query_weight:g}")
        ax.set_xlabel("query image weight")
        ax.set_ylabel("recall")
        ax.set_ylim(0.0, 1.0)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    else:
        ks = list(RECALL_KS)
        ax.bar([f"recall@{k}" for k in ks], [report.best.recall[k] for k in ks],
               color="tab:blue", width=0.5)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("recall")
    ax.set_title(f"{report.task}: {report.query_count} queries over "
                 f"{report.index_size} products")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_eval_csv(report: EvalReport, path) -> Path:
    """One row per grid cell, full float precision."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query_weight", "index_weight"]
                        + [f"recall_at_{k}" for k in RECALL_KS])
        for c in report.cells:
            writer.writerow([repr(c.query_weight), repr(c.index_weight)]
                            + [repr(c.recall[k]) for k in RECALL_KS])
    return path
