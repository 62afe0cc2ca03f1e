"""Matplotlib figures written next to the CSV/text reports."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_NAMES, MetricSummary  # noqa: E402

__all__ = ["plot_history", "plot_metric_runs", "plot_erf_panel"]


def _setup() -> None:
    plt.rcParams["axes.spines.top"] = False
    plt.rcParams["axes.spines.right"] = False
    plt.rcParams["savefig.dpi"] = 150


def _out(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_history(history: Sequence, path) -> Path:
    """Training loss (log scale when positive) and learning rate per epoch."""
    _setup()
    epochs = [h.epoch for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(epochs, [h.loss for h in history], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("weighted CE loss")
    if all(h.loss > 0 for h in history):
        ax1.set_yscale("log")
    ax2.step(epochs, [h.lr for h in history], where="post")
    ax2.set_yscale("log")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    return _out(fig, path)


def plot_metric_runs(summary: MetricSummary, path, title: Optional[str] = None) -> Path:
    _setup()
    fig, ax = plt.subplots(figsize=(5, 3))
    data = [100 * summary.values(k) for k in METRIC_NAMES]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(METRIC_NAMES) + 1), ["Recall", "Precision", "F1", "Accuracy"])
    ax.set_ylabel("%")
    if title:
        ax.set_title(title)
    return _out(fig, path)


def plot_erf_panel(maps: Sequence, path) -> Path:
    """Side-by-side max-normalized ERF maps, one panel per probed feature map."""
    _setup()
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
    for ax, m in zip(axes[0], maps):
        peak = m.values.max()
        ax.imshow(m.values / peak if peak > 0 else m.values, cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"{m.layer}\nch {m.channel}", fontsize=7)
        ax.set_xticks([])
        ax.set_yticks([])
    return _out(fig, path)
