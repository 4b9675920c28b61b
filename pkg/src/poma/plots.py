"""Matplotlib figures written next to the CLI's text reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import TrainReport  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

plt.rcParams.update({
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def _figure(width: float = 6.0):
    return plt.subplots(figsize=(width, width * GOLDEN))


def loss_curves(report: TrainReport, path, window: int = 50) -> Path:
    """Per-component losses (log scale) with the moving-average total overlaid."""
    fig, ax = _figure()
    steps = np.arange(report.steps)
    series = [("view", report.loss_view), ("total", report.loss_total)]
    if report.stage == "main":
        series[1:1] = [("scene", report.loss_scene), ("pjepa", report.loss_pjepa)]
    for label, ys in series:
        ax.plot(steps, ys, lw=0.8, alpha=0.6, label=label)
    ma = report.moving_average(window)
    if len(ma) and report.steps >= window:
        ax.plot(np.arange(window - 1, report.steps), ma, color="k", lw=1.5,
                label=f"total ({window}-step mean)")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"{report.stage} stage")
    ax.legend(frameon=False, fontsize=8)
    lr_ax = ax.twinx()
    lr_ax.plot(steps, report.lr, color="0.6", ls="--", lw=0.8)
    lr_ax.set_ylabel("learning rate", color="0.4")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def recall_curve(recalls: Mapping[int, float], path, m: int | None = None) -> Path:
    fig, ax = _figure(5.0)
    ns = sorted(recalls)
    ax.plot(ns, [recalls[n] for n in ns], marker="o")
    ax.set_xlabel("N")
    ax.set_ylabel("recall@N")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"R@{m}-N" if m is not None else "recall@N")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def localization_map(points: Sequence[np.ndarray], selected: Sequence[int], path) -> Path:
    """Top-down scatter of merged views; retrieved views drawn in red."""
    fig, ax = _figure(5.0)
    for i, pm in enumerate(points):
        pts = pm.reshape(-1, 3)
        pts = pts[~np.isnan(pts).any(axis=1)][::7]
        hit = i in selected
        ax.scatter(pts[:, 0], pts[:, 1], s=1.5, c="tab:red" if hit else "0.75",
                   zorder=2 if hit else 1)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
