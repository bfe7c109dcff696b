"""Static PNG figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(epoch_rows: Sequence[dict], path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        ep = [r["epoch"] for r in epoch_rows]
        for key in ("total", "sup", "dcp"):
            axes[0].plot(ep, [r[key] for r in epoch_rows], label=key)
        axes[0].set_xlabel("epoch")
        axes[0].set_ylabel("loss")
        axes[0].legend()
        axes[1].plot(ep, [r["cons"] for r in epoch_rows], color="C3", label="consistency")
        ax2 = axes[1].twinx()
        ax2.plot(ep, [r["accept_rate"] for r in epoch_rows], color="C2", ls="--", label="accepted")
        ax2.set_ylim(-0.05, 1.05)
        ax2.set_ylabel("CSE accept rate")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("consistency loss")
        return _save(fig, path)


def plot_metrics(results, path):
    """Per-subject bars for DSC, HD95 and ASD."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
        names = [r.subject for r in results]
        x = np.arange(len(names))
        for ax, key, unit in zip(axes, ("dsc", "hd95", "asd"), ("", " (mm)", " (mm)")):
            ax.bar(x, [getattr(r, key) for r in results], color="C0")
            ax.set_xticks(x, names, rotation=45, ha="right")
            ax.set_title(key.upper() + unit)
        return _save(fig, path)


def plot_ablation(table, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
        names = [name for name, _ in table.rows]
        x = np.arange(len(names))
        for ax, key in zip(axes, ("dsc", "hd95", "asd")):
            vals = [np.array([getattr(r, key) for r in res]) for _, res in table.rows]
            ax.bar(x, [v.mean() for v in vals], yerr=[v.std(ddof=1) if v.size > 1 else 0 for v in vals],
                   color="C1", capsize=3)
            ax.set_xticks(x, names, rotation=30, ha="right")
            ax.set_title(key.upper())
        fig.suptitle(f"ablation: {table.axis}")
        return _save(fig, path)
