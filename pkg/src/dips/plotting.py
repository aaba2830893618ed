"""Threshold-sweep and qualitative plots (matplotlib, non-interactive backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_sweep(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    return header, rows


def plot_sweep(csv_paths, out_path, labels=None, column="boxacc@0.5"):
    """BoxAcc against CAM threshold for one or several sweep CSV files."""
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]
    labels = labels or [Path(p).parent.name for p in csv_paths]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for path, label in zip(csv_paths, labels):
        header, rows = read_sweep(path)
        if column in header:
            ax.plot(rows[:, 0], rows[:, header.index(column)], label=label)
        else:
            for j, name in enumerate(header[1:], start=1):
                ax.plot(rows[:, 0], rows[:, j], label=f"{label} {name}")
    ax.set_xlabel("threshold")
    ax.set_ylabel(column if len(csv_paths) > 1 else "BoxAcc")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_maps(images, maps, out_path, boxes=None, ncols=6):
    """Image / foreground-map pairs in a grid, optional ground-truth boxes."""
    n = len(images)
    nrows = 2 * int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols, 1.6 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, (img, m) in enumerate(zip(images, maps)):
        r, c = 2 * (i // ncols), i % ncols
        axes[r, c].imshow(np.clip(img, 0, 1))
        axes[r + 1, c].imshow(m, vmin=0, vmax=1, cmap="magma")
        if boxes is not None:
            for x0, y0, x1, y1 in boxes[i]:
                for ax in (axes[r, c], axes[r + 1, c]):
                    ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                                               fill=False, ec="lime", lw=1))
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
