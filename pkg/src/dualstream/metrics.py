"""Confusion matrix, per-class and averaged classification metrics, one-vs-rest ROC-AUC."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import CLASS_NAMES
from .errors import DataError


@dataclass
class ConfusionMatrix:
    """counts[i, j] = number of samples of true class i predicted as class j."""

    counts: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true: Sequence[int], y_pred: Sequence[int], k: int = 3, class_names=None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DataError(f"{y_true.size} true labels vs {y_pred.size} predictions")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"labels must lie in [0, {k - 1}]")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = tuple(class_names) if class_names else tuple(CLASS_NAMES[:k]) if k <= len(CLASS_NAMES) else tuple(map(str, range(k)))
    return ConfusionMatrix(counts, names)


@dataclass
class PerClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    # True where the metric's denominator was zero and 0 was reported instead
    degenerate: dict[str, np.ndarray] = field(default_factory=dict)


def _safe_divide(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    flag = den == 0
    return np.divide(num, den, out=np.zeros_like(num), where=~flag), flag


def per_class_prf(cm: ConfusionMatrix) -> PerClassMetrics:
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    precision, p_flag = _safe_divide(tp, tp + fp)
    recall, r_flag = _safe_divide(tp, tp + fn)
    f1, f_flag = _safe_divide(2 * precision * recall, precision + recall)
    return PerClassMetrics(
        precision,
        recall,
        f1,
        c.sum(axis=1).astype(np.int64),
        {"precision": p_flag, "recall": r_flag, "f1": f_flag},
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


def macro_avg(values: Sequence[float]) -> float:
    return float(np.mean(values))


def weighted_avg(values: Sequence[float], supports: Sequence[int]) -> float:
    supports = np.asarray(supports, dtype=np.float64)
    if supports.sum() == 0:
        return 0.0
    return float(np.dot(values, supports) / supports.sum())


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Mann-Whitney AUC with average ranks for ties; None when a class is missing."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_ovr(scores: np.ndarray, y_true: Sequence[int]) -> tuple[list[float | None], float | None]:
    """Per-class one-vs-rest AUC and their mean over the classes where it is defined."""
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != y_true.size:
        raise DataError(f"scores of shape {scores.shape} do not match {y_true.size} labels")
    per_class = []
    for c in range(scores.shape[1]):
        auc = binary_auc(scores[:, c], y_true == c)
        if auc is None:
            warnings.warn(f"AUC undefined for class {c}: only one outcome present; excluded from macro", stacklevel=2)
        per_class.append(auc)
    defined = [a for a in per_class if a is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def roc_curve(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct threshold, from (0, 0) to (1, 1)."""
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    s = np.asarray(scores)[order]
    pos = positive[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(pos)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(pos.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~pos).sum(), 1)]
    return fpr, tpr


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class: PerClassMetrics
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    auc_per_class: list[float | None]
    macro_auc: float | None

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.confusion.class_names

    @property
    def macro_f1(self) -> float:
        return self.macro["f1"]

    def render(self) -> str:
        lines = [f"{'Class':<12}{'Prec.':>8}{'Recall':>8}{'F1':>8}{'Support':>9}"]
        pc = self.per_class
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name.capitalize():<12}{pc.precision[i]:>8.2f}{pc.recall[i]:>8.2f}{pc.f1[i]:>8.3f}{pc.support[i]:>9d}"
            )
        total = int(pc.support.sum())
        for label, row in (("Macro avg", self.macro), ("Weighted", self.weighted)):
            lines.append(f"{label:<12}{row['precision']:>8.2f}{row['recall']:>8.2f}{row['f1']:>8.3f}{total:>9d}")
        auc = "n/a" if self.macro_auc is None else f"{self.macro_auc:.4f}"
        lines.append(f"Accuracy: {100 * self.accuracy:.2f}%  ROC-AUC: {auc}  Macro F1: {self.macro_f1:.4f}")
        return "\n".join(lines) + "\n"

    def rows(self) -> list[tuple[str, str, float, int]]:
        """(scope, metric, value, degenerate flag) records."""
        out = []
        pc = self.per_class
        for i, name in enumerate(self.class_names):
            for metric in ("precision", "recall", "f1"):
                out.append((name, metric, float(getattr(pc, metric)[i]), int(pc.degenerate[metric][i])))
            out.append((name, "support", float(pc.support[i]), 0))
            auc = self.auc_per_class[i]
            out.append((name, "auc", float("nan") if auc is None else auc, int(auc is None)))
        for scope, row in (("macro", self.macro), ("weighted", self.weighted)):
            for metric in ("precision", "recall", "f1"):
                out.append((scope, metric, row[metric], 0))
        out.append(("overall", "accuracy", self.accuracy, 0))
        out.append(("overall", "macro_auc", float("nan") if self.macro_auc is None else self.macro_auc, int(self.macro_auc is None)))
        for i, ti in enumerate(self.class_names):
            for j, pj in enumerate(self.class_names):
                out.append(("confusion", f"{ti}|{pj}", float(self.confusion.counts[i, j]), 0))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scope", "metric", "value", "degenerate"])
        for scope, metric, value, flag in self.rows():
            writer.writerow([scope, metric, "" if flag and np.isnan(value) else repr(value), flag])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> EvalReport:
        records = list(csv.DictReader(io.StringIO(text)))
        get = {(r["scope"], r["metric"]): (float(r["value"]) if r["value"] else None, int(r["degenerate"])) for r in records}
        names = []
        for r in records:
            if r["metric"] == "precision" and r["scope"] not in ("macro", "weighted") and r["scope"] not in names:
                names.append(r["scope"])
        k = len(names)
        counts = np.array([[int(get[("confusion", f"{a}|{b}")][0]) for b in names] for a in names], dtype=np.int64)
        pc = PerClassMetrics(
            *(np.array([get[(n, m)][0] for n in names]) for m in ("precision", "recall", "f1")),
            np.array([int(get[(n, "support")][0]) for n in names], dtype=np.int64),
            {m: np.array([bool(get[(n, m)][1]) for n in names]) for m in ("precision", "recall", "f1")},
        )
        avg = {s: {m: get[(s, m)][0] for m in ("precision", "recall", "f1")} for s in ("macro", "weighted")}
        return cls(
            ConfusionMatrix(counts, tuple(names)),
            pc,
            get[("overall", "accuracy")][0],
            avg["macro"],
            avg["weighted"],
            [get[(n, "auc")][0] for n in names[:k]],
            get[("overall", "macro_auc")][0],
        )


def report_from_confusion(cm: ConfusionMatrix, auc_per_class=None, macro_auc=None) -> EvalReport:
    pc = per_class_prf(cm)
    macro = {m: macro_avg(getattr(pc, m)) for m in ("precision", "recall", "f1")}
    weighted = {m: weighted_avg(getattr(pc, m), pc.support) for m in ("precision", "recall", "f1")}
    k = cm.counts.shape[0]
    return EvalReport(cm, pc, accuracy(cm), macro, weighted, list(auc_per_class or [None] * k), macro_auc)


def classification_report(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    scores: np.ndarray | None = None,
    class_names: Sequence[str] = CLASS_NAMES,
) -> EvalReport:
    k = len(class_names)
    cm = confusion(y_true, y_pred, k, class_names)
    if scores is None:
        return report_from_confusion(cm)
    per_auc, macro_auc = roc_auc_ovr(scores, y_true)
    return report_from_confusion(cm, per_auc, macro_auc)
