"""Macro-averaged classification metrics.

Conventions:

* precision, recall and F1 are computed per class from the confusion matrix
  and averaged over all ``K`` classes with equal weight; a zero denominator
  gives 0 for that class;
* AUROC and AUPRC are one-vs-rest per class on the predicted probabilities,
  then averaged over classes;
* AUROC counts tied scores as half a correctly ordered pair (Mann-Whitney).
  A class without positives or without negatives has AUROC 0.5;
* AUPRC is average precision: the step-wise sum of precision times recall
  increments over distinct score thresholds. A class without positives has
  AUPRC 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auroc", "auprc")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    auprc: float
    confusion: np.ndarray

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in METRIC_NAMES)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, self.as_tuple()))


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ShapeError(f"labels {labels.shape} and predictions {predictions.shape} differ")
    for name, arr in (("labels", labels), ("predictions", predictions)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def binary_auroc(is_positive, scores) -> float:
    """Probability that a random positive outscores a random negative."""
    is_positive = np.asarray(is_positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(is_positive.sum())
    n_neg = is_positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)  # average ranks handle ties
    u = ranks[is_positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(is_positive, scores) -> float:
    """Step-wise area under the precision-recall curve."""
    is_positive = np.asarray(is_positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(is_positive.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    hits = is_positive[order].astype(np.float64)
    # last index of each block of equal scores = one threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(hits)[ends]
    predicted = ends + 1.0
    precision = tp / predicted
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def compute_metrics(labels, probabilities, n_classes: int | None = None) -> MetricsReport:
    """All six metrics from true labels and ``(n, K)`` class probabilities.

    Predictions are the per-row argmax (lowest index on ties).
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ShapeError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    if probs.shape[0] == 0:
        raise ShapeError("cannot evaluate an empty prediction set")
    k = probs.shape[1] if n_classes is None else n_classes
    if probs.shape[1] != k:
        raise ShapeError(f"expected {k} probability columns, got {probs.shape[1]}")
    cm = confusion_matrix(labels, probs.argmax(axis=1), k)
    precision, recall, f1 = per_class_prf(cm)
    aurocs = [binary_auroc(labels == c, probs[:, c]) for c in range(k)]
    aps = [average_precision(labels == c, probs[:, c]) for c in range(k)]
    return MetricsReport(
        accuracy=float(np.trace(cm) / cm.sum()),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        auroc=float(np.mean(aurocs)),
        auprc=float(np.mean(aps)),
        confusion=cm,
    )
