"""Figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 6,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_roc(curves: Mapping[str, Sequence[tuple[float, float]]], path: str | Path,
             aucs: Mapping[str, float] | None = None, title: str | None = None) -> Path:
    """Overlay one ROC curve per label, chance diagonal dashed."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="0.6")
        cmap = plt.get_cmap("tab20")
        for i, (name, pts) in enumerate(curves.items()):
            fpr, tpr = zip(*pts)
            label = f"{name} ({aucs[name]:.3f})" if aucs and name in aucs else name
            ax.plot(fpr, tpr, lw=1.0, color=cmap(i % 20), label=label)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", ncol=2 if len(curves) > 6 else 1, frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def plot_history(history: Sequence[Mapping], path: str | Path) -> Path:
    """Training loss (left axis) and model score where evaluated (right axis)."""
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(epochs, [r["loss"] for r in history], color="C0", lw=1.2)
        ax.set_xlabel("Epoch")
        ax.set_ylabel("BCE loss", color="C0")
        scored = [(r["epoch"], r["model_score"]) for r in history if r.get("model_score") is not None]
        if scored:
            ax2 = ax.twinx()
            ax2.spines["right"].set_visible(True)
            e, s = zip(*scored)
            ax2.plot(e, s, color="C3", lw=1.0, marker=".", ms=3)
            ax2.set_ylabel("Model score", color="C3")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
