"""Figures and text tables for holdout and cross-validation runs.

Rendering uses the headless Agg backend. Every figure here is derived from
CSV/JSON files that are always written first; figures are a convenience.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from datspect.metrics import Curve  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_curves(roc: Curve, pr: Curve, path: Path, roc_auc: float | None = None, pr_auc: float | None = None) -> Path:
    """Side-by-side PR and ROC panels."""
    with plt.rc_context(STYLE):
        fig, (ax_pr, ax_roc) = plt.subplots(1, 2, figsize=(8, 3.6))
        ax_pr.step(pr.x, pr.y, where="pre", color="C0")
        ax_pr.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1.02), ylim=(0, 1.02))
        ax_pr.set_title("(a) PR curve" + (f", AUC = {pr_auc:.4f}" if pr_auc is not None else ""))
        ax_roc.plot(roc.x, roc.y, color="C1")
        ax_roc.plot([0, 1], [0, 1], ls="--", color="0.6", lw=1)
        ax_roc.set(xlabel="False positive rate", ylabel="True positive rate", xlim=(-0.02, 1.02), ylim=(0, 1.02))
        ax_roc.set_title("(b) ROC curve" + (f", AUC = {roc_auc:.4f}" if roc_auc is not None else ""))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_history(histories: Sequence[dict], path: Path, labels: Sequence[str] | None = None) -> Path:
    """Training loss, accuracy and learning rate per epoch, one line per run."""
    labels = labels or [f"run {i}" for i in range(len(histories))]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for h, lab in zip(histories, labels):
            epochs = range(1, len(h["train_loss"]) + 1)
            axes[0].plot(epochs, h["train_loss"], label=lab)
            axes[1].plot(epochs, h["train_accuracy"], label=lab)
            axes[2].plot(epochs, h["lr"], label=lab)
        axes[0].set(xlabel="Epoch", ylabel="Train loss")
        axes[1].set(xlabel="Epoch", ylabel="Train accuracy", ylim=(0, 1.02))
        axes[2].set(xlabel="Epoch", ylabel="Learning rate", yscale="log")
        if len(histories) <= 10:
            axes[0].legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_crossval(rows: Sequence[dict], path: Path, summary: dict | None = None) -> Path:
    """Per-fold train/val accuracy and loss bars with the weighted means as lines."""
    folds = [r["fold"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.4))
        w = 0.38
        xs = range(len(rows))
        for ax, key, name in ((ax_acc, "accuracy", "Accuracy"), (ax_loss, "loss", "Loss")):
            ax.bar([x - w / 2 for x in xs], [r[f"train_{key}"] for r in rows], w, label="train")
            ax.bar([x + w / 2 for x in xs], [r[f"val_{key}"] for r in rows], w, label="val")
            if summary:
                ax.axhline(summary[f"val_{key}_weighted_mean"], color="C1", ls="--", lw=1)
            ax.set_xticks(list(xs), [str(f) for f in folds])
            ax.set(xlabel="Fold", ylabel=name)
        ax_acc.set_ylim(0, 1.05)
        ax_acc.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def format_table(header: Sequence[str], rows: Sequence[Sequence], floatfmt: str = ".4f") -> str:
    def cell(v):
        if isinstance(v, float):
            return format(v, floatfmt)
        return "-" if v is None else str(v)

    body = [[cell(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    line = lambda vals: " | ".join(v.rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *(line(r) for r in body)])


HOLDOUT_FIELDS = (
    ("Test Accuracy", "accuracy"),
    ("Test Loss", "loss"),
    ("PR auc", "pr_auc"),
    ("ROC auc", "roc_auc"),
    ("True Positive", "tp"),
    ("False Positive", "fp"),
    ("True Negative", "tn"),
    ("False Negative", "fn"),
    ("Sensitivity", "sensitivity"),
    ("Specificity", "specificity"),
    ("Precision", "precision"),
)


def holdout_table(metrics: dict) -> str:
    return format_table(["Metric", "Value"], [(name, metrics.get(key)) for name, key in HOLDOUT_FIELDS])


def crossval_table(rows: Sequence[dict], summary: dict) -> str:
    header = ["Fold", "N val", "Train Loss", "Train Accuracy", "Val Loss", "Val Accuracy"]
    body = [
        [r["fold"], r["n_val"], r["train_loss"], r["train_accuracy"], r["val_loss"], r["val_accuracy"]]
        for r in rows
    ]
    body.append(
        [
            "Weighted Mean",
            sum(r["n_val"] for r in rows),
            summary["train_loss_weighted_mean"],
            f"{summary['train_accuracy_weighted_mean']:.4f} (± {summary['train_accuracy_std']:.4f})",
            summary["val_loss_weighted_mean"],
            f"{summary['val_accuracy_weighted_mean']:.4f} (± {summary['val_accuracy_std']:.4f})",
        ]
    )
    return format_table(header, body)
