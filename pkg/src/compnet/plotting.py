"""Report figures written next to the delimited eval output (PNG, headless)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
COLORS = {"seen": "#1f77b4", "unseen": "#d62728"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ap_by_split(ap: Dict[str, float], seen: Sequence[str], path) -> Path:
    """Sorted per-composition AP, seen and unseen pairs coloured separately."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        seen = set(seen)
        for split in ("seen", "unseen"):
            vals = sorted((v for k, v in ap.items() if (k in seen) == (split == "seen")),
                          reverse=True)
            if vals:
                x = np.linspace(0.0, 1.0, len(vals))
                ax.plot(x, vals, ".-", color=COLORS[split], lw=1,
                        label=f"{split} ({len(vals)}), mAP {100 * np.mean(vals):.1f}")
        ax.set_xlabel("composition quantile")
        ax.set_ylabel("average precision")
        ax.set_ylim(0.0, 1.02)
        ax.legend(loc="upper right")
        return _save(fig, path)


def plot_training_curves(history: Sequence[dict], path) -> Path:
    """Per-epoch loss terms (log scale) and learning rate."""
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        epochs = [h["epoch"] for h in history]
        for key in ("total", "attr", "obj", "comp"):
            vals = [h.get(key) for h in history]
            if all(v is not None and v > 0 for v in vals):
                ax.plot(epochs, vals, lw=1.2, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        ax_lr.plot(epochs, [h["lr"] for h in history], color="k", lw=1.2)
        ax_lr.set_xlabel("epoch")
        ax_lr.set_ylabel("learning rate (last step)")
        return _save(fig, path)


def plot_metric_sweep(xs: Sequence[float], series: Dict[str, Sequence[float]], xlabel: str,
                      path) -> Path:
    """One line per named series, e.g. seen/unseen mAP against epoch budget."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, ys in series.items():
            ax.plot(xs, [100 * y if y is not None else np.nan for y in ys], "o-",
                    color=COLORS.get(name), lw=1.2, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mAP (%)")
        ax.legend()
        return _save(fig, path)
