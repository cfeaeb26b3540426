"""Evaluation: thresholded accuracy, ROC/AUC, and the per-batch
positive-weight-ratio diagnostic."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    roc: list[tuple[float, float, float]]  # (threshold, fpr, tpr)
    n_pos: int
    n_neg: int
    by_relation: dict[str, float] = field(default_factory=dict)


def accuracy(
    predictions: np.ndarray, labels: np.ndarray, threshold: float = 0.5
) -> float:
    """Fraction of samples with (p >= threshold) == label; ties count positive."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    if predictions.shape != labels.shape:
        raise ContractError("predictions and labels misaligned")
    decided = (predictions >= threshold).astype(np.int64)
    return float(np.mean(decided == labels))


def roc_auc(
    predictions: np.ndarray, labels: np.ndarray
) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points by sweeping unique score thresholds descending, and the
    trapezoid AUC. Tied scores collapse into a single threshold, which makes
    the trapezoid AUC equal to rank-counting with half credit for ties.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes present")
    order = np.argsort(-predictions, kind="stable")
    scores = predictions[order]
    pos = (labels[order] == 1).astype(np.int64)
    points: list[tuple[float, float, float]] = [(np.inf, 0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            j += 1
        tp += int(pos[i:j].sum())
        fp += (j - i) - int(pos[i:j].sum())
        points.append((float(scores[i]), fp / n_neg, tp / n_pos))
        i = j
    auc = 0.0
    for (_, fpr0, tpr0), (_, fpr1, tpr1) in zip(points, points[1:]):
        auc += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0
    return points, float(auc)


def positive_weight_ratio(labels: np.ndarray, weights: np.ndarray) -> float:
    """Sum of positive-sample weights over the sum of all weights."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.shape != weights.shape:
        raise ContractError("labels and weights misaligned")
    total = float(np.sum(weights))
    if total <= 0.0:
        raise ContractError("total weight must be positive")
    return float(np.sum(weights[labels == 1]) / total)
