"""Report figures: ROC curves and training loss traces, written straight to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import PredictionSet  # noqa: E402

FIGSIZE = (4.5, 4.0)


def roc_points(preds: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates at every distinct score threshold, from (0, 0) to (1, 1)."""
    labels = preds.label_array()
    order = np.argsort(-preds.scores, kind="mergesort")
    scores, labels = preds.scores[order], labels[order]
    last_of_group = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(labels == 1)[last_of_group]
    fp = np.cumsum(labels == 0)[last_of_group]
    n_pos, n_neg = max(tp[-1], 1), max(fp[-1], 1)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def plot_roc(preds: PredictionSet, path, title: str | None = None, auroc: float | None = None) -> None:
    fpr, tpr = roc_points(preds)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    label = "model" if auroc is None else f"model (AUROC {auroc:.4f})"
    ax.plot(fpr, tpr, lw=1.5, label=label)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="0.6", label="chance")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_loss_trace(rows, path, val_history=None) -> None:
    """Loss (and learning rates on a twin axis) against step; optional validation AUROC markers."""
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(steps, [r[1] for r in rows], color="C0", lw=1.2, label="training loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    lr_ax = ax.twinx()
    lr_ax.plot(steps, [r[2] for r in rows], color="C1", lw=0.8, ls="--", label="lr dual")
    lr_ax.plot(steps, [r[3] for r in rows], color="C2", lw=0.8, ls=":", label="lr single")
    lr_ax.set_ylabel("learning rate")
    handles = ax.get_legend_handles_labels()[0] + lr_ax.get_legend_handles_labels()[0]
    if val_history:
        val_ax = ax.twinx()
        val_ax.spines["right"].set_position(("axes", 1.2))
        pts = [(s, r.auroc) for s, r in val_history if r.auroc is not None]
        if pts:
            val_ax.plot(*zip(*pts), "o-", color="C3", ms=3, lw=0.8, label="val AUROC")
            val_ax.set_ylim(0, 1)
            val_ax.set_ylabel("val AUROC")
            handles += val_ax.get_legend_handles_labels()[0]
    ax.legend(handles=handles, loc="upper center", bbox_to_anchor=(0.5, -0.16), ncol=4, frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
