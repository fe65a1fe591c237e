"""Classification metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """ROC-AUC needs both classes present."""


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC with tied scores given their average rank."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_roc_auc(scores: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean AUC over columns that contain both classes.

    ``targets`` is either an integer class vector (one-vs-rest against the
    columns of ``scores``) or a 0/1 matrix shaped like ``scores``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if scores.shape[1] == 2:
            return roc_auc(scores[:, 1], targets == 1)
        targets = (targets[:, None] == np.arange(scores.shape[1])).astype(np.float64)
    if mask is None:
        mask = np.ones_like(scores, dtype=bool)
    aucs = []
    for j in range(scores.shape[1]):
        m = mask[:, j]
        col = targets[m, j]
        if col.size and 0 < col.sum() < col.size:
            aucs.append(roc_auc(scores[m, j], col))
    if not aucs:
        raise UndefinedMetricError("no task has both classes present")
    return float(np.mean(aucs))
