"""Figures written next to the CSV outputs of ``kprnet eval`` and ``kprnet train``."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def iou_bar_chart(ious: Sequence[float], names: Sequence[str], path, title: str = "per-class IoU") -> Path:
    """Horizontal bars in percent; undefined classes (nan) are left blank."""
    values = 100 * np.asarray(ious, dtype=np.float64)
    defined = ~np.isnan(values)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.22 * len(names) + 1.0))
        y = np.arange(len(names))
        ax.barh(y[defined], values[defined], color="#4c72b0")
        ax.set_yticks(y, labels=list(names))
        ax.invert_yaxis()
        ax.set_xlim(0, 100)
        ax.set_xlabel("IoU [%]")
        if defined.any():
            mean = values[defined].mean()
            ax.axvline(mean, color="#c44e52", lw=1, ls="--")
            ax.set_title(f"{title} (mean {mean:.1f})")
        else:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def loss_curve(history: Sequence[tuple[int, float, float]], path) -> Path:
    """Training loss against step, learning rate on a twin axis."""
    steps = np.array([h[0] for h in history])
    lrs = np.array([h[1] for h in history])
    losses = np.array([h[2] for h in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(steps, losses, color="#4c72b0", lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if losses.size and (losses > 0).all():
            ax.set_yscale("log")
        twin = ax.twinx()
        twin.plot(steps, lrs, color="#999999", lw=0.8)
        twin.set_ylabel("learning rate")
        twin.spines["top"].set_visible(False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def range_image_figure(data: np.ndarray, path) -> Path:
    """Both input channels of a range image stacked vertically."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, figsize=(8.0, 2.4))
        for ax, channel, label in zip(axes, range(2), ("inverse depth", "remission")):
            ax.imshow(data[..., channel], aspect="auto", interpolation="nearest", cmap="viridis")
            ax.set_ylabel(label)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
