"""Multi-class evaluation: accuracy, macro precision/recall/F1, one-vs-rest ROC and AUC."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MetricsWarning(UserWarning):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # rows = true class, columns = predicted class
    per_class: dict

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.precision,
            "macro_recall": self.recall,
            "macro_f1": self.f1,
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
        }


def confusion_matrix(predictions, labels, class_count: int) -> np.ndarray:
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _ratio(num: float, den: float, what: str, cls: int) -> float:
    if den == 0:
        warnings.warn(f"{what} of class {cls} has a zero denominator; reporting 0", MetricsWarning, stacklevel=3)
        return 0.0
    return num / den


def compute_metrics(predictions, labels, class_count: int | None = None) -> MetricsReport:
    """Accuracy plus unweighted (macro) averages of per-class precision, recall and F1.

    Classes whose precision or recall denominator is zero contribute 0 and
    emit a :class:`MetricsWarning`.
    """
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(y) == 0:
        raise ValueError("cannot compute metrics on an empty input")
    if len(pred) != len(y):
        raise ValueError(f"{len(pred)} predictions for {len(y)} labels")
    if class_count is None:
        class_count = int(max(pred.max(), y.max())) + 1
    if y.min() < 0 or y.max() >= class_count or pred.min() < 0 or pred.max() >= class_count:
        raise ValueError(f"labels and predictions must lie in [0, {class_count})")
    cm = confusion_matrix(pred, y, class_count)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    per_class = {}
    precs, recs, f1s = [], [], []
    for c in range(class_count):
        p = _ratio(tp[c], predicted[c], "precision", c)
        r = _ratio(tp[c], actual[c], "recall", c)
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(f)
        per_class[str(c)] = {"precision": p, "recall": r, "f1": f, "support": int(actual[c])}
    return MetricsReport(
        accuracy=float(tp.sum() / len(y)),
        precision=float(np.mean(precs)),
        recall=float(np.mean(recs)),
        f1=float(np.mean(f1s)),
        confusion=cm,
        per_class=per_class,
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def binary_roc(scores, positives) -> RocCurve:
    """ROC of one score vector; equal scores form a single threshold step."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    # last index of every tie group, walking from the highest score down
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(pos)[ends]
    fp = np.cumsum(~pos)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(fpr, tpr, auc)


def roc_auc(scores, labels) -> dict[int, RocCurve]:
    """One-vs-rest ROC curve per class; classes lacking positives or negatives are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(y):
        raise ValueError("scores must be (n_samples, n_classes) aligned with labels")
    curves = {}
    for c in range(scores.shape[1]):
        pos = y == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has no positives or no negatives; ROC omitted", MetricsWarning, stacklevel=2)
            continue
        curves[c] = binary_roc(scores[:, c], pos)
    return curves


def roc_report(curves: dict[int, RocCurve]) -> dict:
    return {str(c): {"auc": rc.auc, "fpr": rc.fpr.tolist(), "tpr": rc.tpr.tolist()} for c, rc in curves.items()}


def write_roc_csv(directory, curves: dict[int, RocCurve], stem: str = "roc") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, rc in curves.items():
        path = directory / f"{stem}_class{c}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            for a, b in zip(rc.fpr, rc.tpr):
                w.writerow([repr(float(a)), repr(float(b))])
        paths.append(path)
    return paths
