"""Evaluation metrics: rank-based AUC, macro averages, confusion matrices.

AUC uses midranks, which gives exactly half credit to tied score pairs
and agrees with trapezoidal ROC integration to floating-point accuracy
in O(N log N) instead of threshold sweeping.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError


def roc_auc_binary(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count half. Both classes must be present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-d")
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError(f"need both classes present, got {n_pos} positive / {n_neg} negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    """Row-normalized confusion counts; rows are true classes.

    Rows of classes absent from ``labels`` stay all-zero (documented
    exception to the rows-sum-to-one invariant).
    """
    counts = np.zeros((n_classes, n_classes), dtype=np.float64)
    for t, p in zip(labels, predictions):
        counts[t, p] += 1.0
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def macro_f1(labels, predictions, n_classes: int) -> float:
    """Unweighted mean of per-class F1.

    A class with neither true samples nor predictions is excluded from the
    average; a class with samples or predictions but no true positives
    contributes 0.
    """
    scores = []
    for c in range(n_classes):
        tp = int(((labels == c) & (predictions == c)).sum())
        fp = int(((labels != c) & (predictions == c)).sum())
        fn = int(((labels == c) & (predictions != c)).sum())
        if tp + fp + fn == 0:
            continue
        scores.append(2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0)
    if not scores:
        raise DomainError("no class has samples or predictions")
    return float(np.mean(scores))


@dataclass
class MetricsEntry:
    """One evaluation: the paper's metric triple plus the confusion matrix."""

    auc: float
    accuracy: float
    f1: float
    confusion: np.ndarray
    n_samples: int


def macro_metrics(probs: np.ndarray, labels, n_classes: int | None = None) -> MetricsEntry:
    """Macro one-vs-rest AUC, argmax accuracy, macro F1, confusion matrix.

    Argmax ties break toward the lowest class index. Classes absent from
    the labels are excluded from the AUC average with a warning.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ShapeError(f"probs {probs.shape} do not match {labels.shape[0]} labels")
    if n_classes is None:
        n_classes = probs.shape[1]
    if probs.shape[1] != n_classes:
        raise ShapeError(f"probs have {probs.shape[1]} columns, expected {n_classes}")
    if n_classes < 2:
        raise DomainError("need at least two classes")

    aucs = []
    for c in range(n_classes):
        rest = (labels == c).astype(np.int64)
        if rest.sum() == 0 or rest.sum() == len(rest):
            warnings.warn(f"class {c} absent from labels; excluded from macro AUC")
            continue
        aucs.append(roc_auc_binary(probs[:, c], rest))
    if not aucs:
        raise DomainError("no class with both positives and negatives present")

    predictions = probs.argmax(axis=1)
    accuracy = float((predictions == labels).mean())
    return MetricsEntry(
        auc=float(np.mean(aucs)),
        accuracy=accuracy,
        f1=macro_f1(labels, predictions, n_classes),
        confusion=confusion_matrix(labels, predictions, n_classes),
        n_samples=len(labels),
    )


@dataclass
class AblationCell:
    dataset: str
    label_fraction: float
    dropout: float
    mode: str
    status: str  # "ok" or "skipped"
    metrics: MetricsEntry | None = None


@dataclass
class EvalReport:
    """Per-dataset metrics plus, for sweeps, one entry per ablation cell."""

    datasets: dict[str, MetricsEntry] = field(default_factory=dict)
    cells: list[AblationCell] = field(default_factory=list)
