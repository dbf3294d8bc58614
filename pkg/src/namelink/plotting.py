"""Figures for comparison reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BIN_ORDER = ("1", "2", "3", "4+")


def bin_grid(report: dict) -> np.ndarray:
    """Accuracy per (names, boxes) cell as a 4x4 array; empty cells are NaN."""
    grid = np.full((len(BIN_ORDER), len(BIN_ORDER)), np.nan)
    for key, cell in report.get("bins", {}).items():
        n_part, m_part = key.split(",")
        i = BIN_ORDER.index(n_part.split("=")[1])
        j = BIN_ORDER.index(m_part.split("=")[1])
        if cell.get("total"):
            grid[i, j] = cell["accuracy"]
    return grid


def plot_comparison(reports: Sequence[dict], labels: Sequence[str], path) -> Path:
    """Accuracy bars with Wilson error bars, plus a per-bin heatmap for each run."""
    if len(reports) != len(labels) or not reports:
        raise ValueError("need one label per report and at least one report")
    k = len(reports)
    fig, axes = plt.subplots(1, k + 1, figsize=(4.2 + 3.2 * k, 3.6),
                             gridspec_kw={"width_ratios": [1.4] + [1] * k})
    ax = axes[0]
    acc = np.array([100 * r["accuracy"] for r in reports])
    lo = np.array([100 * r["interval"]["lower"] if r.get("interval") else a
                   for r, a in zip(reports, acc / 100)])
    hi = np.array([100 * r["interval"]["upper"] if r.get("interval") else a
                   for r, a in zip(reports, acc / 100)])
    x = np.arange(k)
    ax.bar(x, acc, color="#4c72b0", width=0.6)
    ax.errorbar(x, acc, yerr=[acc - lo, hi - acc], fmt="none", ecolor="black", capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.spines[["top", "right"]].set_visible(False)

    for ax, rep, label in zip(axes[1:], reports, labels):
        grid = bin_grid(rep)
        im = ax.imshow(np.ma.masked_invalid(grid), vmin=0, vmax=1, cmap="viridis", origin="lower")
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                if not np.isnan(grid[i, j]):
                    ax.text(j, i, f"{100 * grid[i, j]:.0f}", ha="center", va="center",
                            color="white" if grid[i, j] < 0.6 else "black", fontsize=7)
        ax.set_xticks(range(len(BIN_ORDER)))
        ax.set_xticklabels(BIN_ORDER)
        ax.set_yticks(range(len(BIN_ORDER)))
        ax.set_yticklabels(BIN_ORDER)
        ax.set_xlabel("boxes")
        if ax is axes[1]:
            ax.set_ylabel("names")
        ax.set_title(label, fontsize=9)
    fig.colorbar(im, ax=list(axes[1:]), shrink=0.8, label="accuracy")
    out = Path(path)
    fig.savefig(out, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return out
