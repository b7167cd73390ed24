"""Report emission: comma-separated tables plus rendered figures.

Every stage that produces a table also renders a figure next to it so a run
directory can be skimmed without loading the CSVs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def save_grid_heatmap(path: str | Path, table: list[dict], title: str = "") -> None:
    """Render a (strength x guidance scale) score grid as an annotated heatmap."""
    omegas = sorted({row["omega_cfg"] for row in table})
    strengths = sorted({row["strength"] for row in table})
    grid = np.full((len(strengths), len(omegas)), np.nan)
    for row in table:
        grid[strengths.index(row["strength"]), omegas.index(row["omega_cfg"])] = row["fid"]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(omegas), 1.0 + 0.7 * len(strengths)))
    im = ax.imshow(grid, cmap="viridis_r")
    ax.set_xticks(range(len(omegas)), [f"{w:g}" for w in omegas])
    ax.set_yticks(range(len(strengths)), [f"{s:g}" for s in strengths])
    ax.set_xlabel("guidance scale")
    ax.set_ylabel("strength")
    if title:
        ax.set_title(title)
    best = np.unravel_index(np.nanargmin(grid), grid.shape)
    for i in range(len(strengths)):
        for j in range(len(omegas)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center",
                        fontsize=7, color="white" if (i, j) != best else "red")
    fig.colorbar(im, ax=ax, shrink=0.8, label="FID")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bar_chart(path: str | Path, labels: list[str], values: list[float],
                   ylabel: str, title: str = "",
                   groups: list[list[float]] | None = None,
                   group_names: list[str] | None = None) -> None:
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(labels), 3.2))
    x = np.arange(len(labels))
    if groups is None:
        ax.bar(x, values, width=0.6)
    else:
        width = 0.8 / len(groups)
        for gi, vals in enumerate(groups):
            ax.bar(x + (gi - (len(groups) - 1) / 2) * width, vals, width=width,
                   label=group_names[gi] if group_names else None)
        ax.legend(fontsize=7)
    ax.set_xticks(x, labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_curves(path: str | Path, history: list[dict],
                        title: str = "") -> None:
    """Training curve: loss on the left axis, validation accuracy on the right."""
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], "-o", ms=3,
            color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["val_acc"] for h in history], "-s", ms=3,
             color="tab:orange", label="val acc")
    ax2.set_ylabel("validation accuracy", color="tab:orange")
    ax2.set_ylim(0, 1.02)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(path: str | Path, losses: list[float], title: str = "",
                    smooth: int = 25) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.0))
    ax.plot(losses, alpha=0.3, lw=0.7, color="tab:blue")
    if len(losses) > smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, len(losses)),
                np.convolve(losses, kernel, mode="valid"),
                color="tab:blue", lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image_grid(path: str | Path, images: np.ndarray, ncol: int = 8,
                    title: str = "") -> None:
    """Tile a stack of [0,1] grayscale images into one PNG."""
    n = len(images)
    ncol = min(ncol, n)
    nrow = int(np.ceil(n / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(1.1 * ncol, 1.1 * nrow + 0.3))
    axes = np.atleast_1d(axes).reshape(nrow, ncol)
    for i in range(nrow * ncol):
        ax = axes[i // ncol, i % ncol]
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], cmap="gray", vmin=0, vmax=1)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
