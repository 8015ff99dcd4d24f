"""Figures written next to command outputs (training curves, registration slices)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CURVE_COLUMNS = ("ncc", "smooth", "mse", "total")


def moving_average(x, k):
    x = np.asarray(x, dtype=float)
    if k <= 1 or len(x) < k:
        return x
    c = np.cumsum(np.concatenate([[0.0], x]))
    head = c[1:k] / np.arange(1, k)
    return np.concatenate([head, (c[k:] - c[:-k]) / k])


def plot_training_curves(runs, out_path, smooth=10):
    """Overlay metrics logs; ``runs`` maps a label to a metrics CSV path."""
    from .trainer import read_metrics

    fig, axes = plt.subplots(1, len(CURVE_COLUMNS), figsize=(4 * len(CURVE_COLUMNS), 3.2))
    for label, path in runs.items():
        m = read_metrics(path)
        for ax, col in zip(axes, CURVE_COLUMNS):
            line, = ax.plot(m["iter"], m[col], alpha=0.25, lw=0.8)
            ax.plot(m["iter"], moving_average(m[col], smooth), color=line.get_color(), lw=1.6, label=label)
    for ax, col in zip(axes, CURVE_COLUMNS):
        ax.set_title(col)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_registration(fixed, moving, warped, dvf, out_path, axis=0):
    """Middle slices of fixed/moving/warped plus the in-plane displacement magnitude."""
    mid = fixed.shape[axis] // 2
    take = lambda v: np.take(v, mid, axis=axis)  # noqa: E731
    mag = np.sqrt((np.asarray(dvf) ** 2).sum(axis=0))
    panels = [("fixed", take(fixed)), ("moving", take(moving)), ("warped", take(warped)),
              ("|fixed - warped|", np.abs(take(fixed) - take(warped))), ("|u| (voxels)", take(mag))]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    for ax, (title, img) in zip(axes, panels):
        im = ax.imshow(img, cmap="gray" if "u" not in title else "viridis", origin="lower")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
        if "u" in title:
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
