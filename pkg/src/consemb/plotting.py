"""Figures written next to the tabular outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(curves: dict, path, key="train_loss"):
    """One line per run; ``curves`` maps a label to a list of epoch rows."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rows in curves.items():
        ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_metric_ci(report, path, metrics=None):
    names = [m for m in (metrics or report.metrics) if m in report.metrics]
    pts = np.array([report.metrics[m].point for m in names])
    lo = pts - np.array([report.metrics[m].ci_low for m in names])
    hi = np.array([report.metrics[m].ci_high for m in names]) - pts
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names)), 3.5))
    ax.errorbar(range(len(names)), pts, yerr=[lo, hi], fmt="o", capsize=3)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean with bootstrap CI")
    return _save(fig, path)


def plot_grouped_bars(rows: list, label_key: str, value_keys, path, ylabel="score"):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    width = 0.8 / len(value_keys)
    x = np.arange(len(rows))
    for i, k in enumerate(value_keys):
        ax.bar(x + i * width, [r[k] for r in rows], width, label=k)
    ax.set_xticks(x + width * (len(value_keys) - 1) / 2, [str(r[label_key]) for r in rows])
    ax.set_xlabel(label_key)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_mask_overlay(volume, gt, pred, path, axis=2):
    """Middle slice of the volume with reference and predicted contours."""
    k = volume.shape[axis] // 2
    take = lambda a: np.take(a, k, axis=axis).T  # noqa: E731
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(take(volume), cmap="gray", origin="lower")
    if take(gt).any():
        ax.contour(take(gt), levels=[0.5], colors="lime", linewidths=1)
    if take(pred).any():
        ax.contour(take(pred), levels=[0.5], colors="red", linewidths=1, linestyles="--")
    ax.set_axis_off()
    return _save(fig, path)
