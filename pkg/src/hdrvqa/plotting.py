"""Report figures rendered straight to files with the Agg backend."""
from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "hdrvqa",
}


def _save(fig, path: str | os.PathLike) -> str:
    # no timestamp in the file so reruns are byte-identical
    fig.savefig(path, metadata={"Date": None} if str(path).endswith((".svg", ".pdf")) else {"Software": None})
    plt.close(fig)
    return str(path)


def loss_curve(history: Sequence[Mapping], path: str | os.PathLike) -> str:
    """Training loss and learning rate per epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epochs = [h["epoch"] for h in history]
        ax.plot(epochs, [h["loss"] for h in history], marker="o", color="C0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        if history and "lr" in history[0]:
            ax2 = ax.twinx()
            ax2.plot(epochs, [h["lr"] for h in history], ls="--", color="C1", label="learning rate")
            ax2.set_ylabel("learning rate")
            ax2.grid(False)
        ax.set_title("Fine-tuning")
        return _save(fig, path)


def trial_summary(per_trial: Sequence, pred: np.ndarray, mos: np.ndarray, curve,
                  path: str | os.PathLike) -> str:
    """Left: per-trial SROCC and LCC histograms. Right: one trial's predictions against MOS with its fitted logistic."""
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
        s = [t.srocc for t in per_trial]
        l = [t.lcc for t in per_trial]
        bins = np.linspace(min(min(s), min(l), 0.0), 1.0, 25)
        a.hist(s, bins=bins, alpha=0.7, label=f"SROCC (median {np.median(s):.3f})")
        a.hist(l, bins=bins, alpha=0.7, label=f"LCC (median {np.median(l):.3f})")
        a.set_xlabel("correlation")
        a.set_ylabel("trials")
        a.legend(loc="upper left")
        b.scatter(pred, mos, s=10, alpha=0.7)
        if curve is not None and np.ptp(pred) > 0:
            xs = np.linspace(np.min(pred), np.max(pred), 200)
            b.plot(xs, curve(xs), color="C3", label="logistic fit")
            b.legend(loc="upper left")
        b.set_xlabel("predicted score")
        b.set_ylabel("subjective score")
        return _save(fig, path)


def ablation_bars(axis: str, values: Sequence, accuracies: Sequence[float], path: str | os.PathLike,
                  chance: float | None = None, ylabel: str = "probe accuracy") -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        labels = [str(v) for v in values]
        ax.set_axisbelow(True)
        ax.bar(labels, accuracies, color="C0")
        for x, y in zip(labels, accuracies):
            ax.annotate(f"{y:.3f}", (x, y), ha="center", va="bottom", fontsize=8)
        if chance is not None:
            ax.axhline(chance, ls=":", color="grey", label="chance")
            ax.legend(loc="lower right", framealpha=0.9, frameon=True)
        top = max(list(accuracies) + ([chance] if chance is not None else []))
        ax.set_ylim(0, 1.15 * top if top > 0 else 1)
        ax.set_xlabel(axis)
        ax.set_ylabel(ylabel)
        return _save(fig, path)
