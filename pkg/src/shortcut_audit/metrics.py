"""ROC sweep and equal error rate with fixed score polarity.

Higher scores mean "more positive". The polarity is never flipped, so an
EER above 0.5 signals inverted labels.
"""

from __future__ import annotations

import numpy as np


class OneClassError(ValueError):
    pass


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise OneClassError("both classes are required")
    return pos, neg


def roc_points(scores, labels) -> np.ndarray:
    """Rows of (threshold, miss_rate, false_alarm_rate).

    miss = P(s < t | y=1) and false alarm = P(s >= t | y=0), evaluated at
    every unique score plus a final ``+inf`` threshold where nothing is
    accepted.
    """
    pos, neg = _split(scores, labels)
    thresholds = np.append(np.unique(np.concatenate([pos, neg])), np.inf)
    miss = np.searchsorted(pos, thresholds, side="left") / pos.size
    fa = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    return np.column_stack([thresholds, miss, fa])


def eer(scores, labels) -> float:
    """Equal error rate by linear interpolation at the miss/false-alarm crossing."""
    _, miss, fa = roc_points(scores, labels).T
    diff = fa - miss  # starts at 1, ends at -1, non-increasing
    k = int(np.argmax(diff <= 0.0))  # k >= 1 since diff[0] == 1
    d0, d1 = diff[k - 1], diff[k]
    t = d0 / (d0 - d1)
    return float(miss[k - 1] + t * (miss[k] - miss[k - 1]))


def eer_from_classes(pos_scores, neg_scores) -> float:
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    return eer(np.concatenate([pos, neg]), np.concatenate([np.ones(pos.size, int), np.zeros(neg.size, int)]))
