"""Ranking and threshold metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricUndefinedError, ShapeError


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks: P(s+ > s-) + P(s+ = s-) / 2."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """Metrics of ``scores >= threshold``; precision with no predicted positives is 0."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
