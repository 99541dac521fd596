"""Matplotlib figures for a run: training curves, confusion matrix, ROC curves, fold losses."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ConfusionMatrix, roc_curve  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return str(path)


def plot_training_curves(rows: Sequence[dict], path) -> str:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for fold in sorted({r["fold"] for r in rows}):
        fr = [r for r in rows if r["fold"] == fold]
        ep = [r["epoch"] for r in fr]
        (line,) = ax_loss.plot(ep, [r["train_loss"] for r in fr], label=f"fold {fold} train")
        ax_loss.plot(ep, [r["val_loss"] for r in fr], "--", color=line.get_color(), label=f"fold {fold} val")
        ax_acc.plot(ep, [r["train_acc"] for r in fr], color=line.get_color())
        ax_acc.plot(ep, [r["val_acc"] for r in fr], "--", color=line.get_color())
    ax_loss.set(xlabel="epoch", ylabel="focal loss", title="Loss")
    ax_acc.set(xlabel="epoch", ylabel="accuracy", title="Accuracy", ylim=(0, 1.02))
    ax_loss.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_confusion(cm: ConfusionMatrix, path) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    counts = cm.counts
    ax.imshow(counts, cmap="Blues")
    k = counts.shape[0]
    ax.set_xticks(range(k), cm.class_names)
    ax.set_yticks(range(k), cm.class_names)
    ax.set(xlabel="predicted", ylabel="true", title="Confusion matrix")
    threshold = counts.max() / 2 if counts.size else 0
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center", color="white" if counts[i, j] > threshold else "black")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_roc(probabilities: np.ndarray, labels: np.ndarray, class_names: Sequence[str], path) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for c, name in enumerate(class_names):
        positive = labels == c
        if positive.all() or not positive.any():
            continue
        fpr, tpr = roc_curve(probabilities[:, c], positive)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title="One-vs-rest ROC")
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_fold_losses(records, best, path) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    folds = [r.fold for r in records]
    colors = ["tab:orange" if r is best else "tab:blue" for r in records]
    ax.bar(folds, [r.val_loss for r in records], color=colors)
    ax.set(xlabel="fold", ylabel="best validation loss", title="Per-fold best checkpoints")
    fig.tight_layout()
    return _save(fig, Path(path))


def write_run_figures(directory, rows, records, best, test=None) -> dict[str, str]:
    d = Path(directory)
    out = {
        "curves": plot_training_curves(rows, d / "training_curves.png"),
        "fold_losses": plot_fold_losses(records, best, d / "fold_losses.png"),
    }
    if test is not None:
        out.update(report_figures(d, test.report.confusion, test.probabilities, test.labels))
    return {k: str(Path(v).relative_to(d.parent)) for k, v in out.items()}


def report_figures(directory, cm: ConfusionMatrix, probabilities=None, labels=None) -> dict[str, str]:
    d = Path(directory)
    out = {"confusion": plot_confusion(cm, d / "confusion.png")}
    if probabilities is not None:
        out["roc"] = plot_roc(np.asarray(probabilities), np.asarray(labels), cm.class_names, d / "roc.png")
    return out
