"""Matplotlib figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_losses(rows: list[dict], path, smooth: int = 20) -> Path:
    """Per-step loss terms with a running mean over ``smooth`` steps."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.array([r["step"] for r in rows])
    for key in ("L_inv", "L_cls", "L_w", "L"):
        y = np.array([r[key] for r in rows], dtype=float)
        if smooth > 1 and y.size >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = steps[smooth - 1 :]
        else:
            x = steps
        ax.plot(x, y, label=key, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_confusion(confusion, path, class_names=CLASS_NAMES, title: str = "") -> Path:
    c = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    ax.imshow(c, cmap="Blues")
    names = list(class_names)[: c.shape[0]]
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            ax.text(j, i, str(int(c[i, j])), ha="center", va="center",
                    color="white" if c[i, j] > c.max() / 2 else "black")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_ablation(summary: list[dict], path) -> Path:
    """Bar chart of mean target accuracy with one-std error bars per variant."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    names = [s["scenario"] for s in summary]
    means = np.array([s["mean"] for s in summary]) * 100
    stds = np.array([s["std"] for s in summary]) * 100
    ax.bar(names, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_ylabel("target accuracy (%)")
    lo = max(0.0, float((means - stds).min()) - 5)
    ax.set_ylim(lo, min(100.0, float((means + stds).max()) + 5))
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)
