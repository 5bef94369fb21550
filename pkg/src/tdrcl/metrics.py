"""MSE, AUC and NDCG@k for evaluation on held-out (MAR) ratings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import DomainError

POSITIVE_THRESHOLD = 4


def _pair(preds, labels):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise DomainError("metric of an empty set is undefined")
    return preds, labels


def mse(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(np.mean((preds - labels) ** 2))


def auc(preds, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    preds, labels = _pair(preds, labels)
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs at least one positive and one negative label")
    ranks = rankdata(preds)  # average ranks handle ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_trapezoid(preds, labels) -> float:
    """AUC as the trapezoidal area under the ROC curve; an independent check on :func:`auc`."""
    preds, labels = _pair(preds, labels)
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs at least one positive and one negative label")
    order = np.argsort(-preds, kind="stable")
    s, y = preds[order], pos[order]
    # one ROC point per distinct threshold
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, np.cumsum(y)[last] / n_pos]
    fpr = np.r_[0.0, np.cumsum(~y)[last] / n_neg]
    return float(np.trapezoid(tpr, fpr))


def _dcg(gains: np.ndarray, k: int) -> float:
    g = gains[:k]
    return float(np.sum(g / np.log2(np.arange(2, g.size + 2))))


def ndcg_at_k(users, preds, labels, k: int) -> float:
    """Mean NDCG@k over users that have at least one positive.

    Gains are the binary labels.  Within a user, ties in the score are broken
    by input order.
    """
    if k <= 0:
        raise DomainError(f"k must be positive, got {k}")
    preds, labels = _pair(preds, labels)
    users = np.asarray(users).ravel()
    if users.shape != preds.shape:
        raise ValueError("users must align with predictions")
    gains = (labels > 0).astype(np.float64)
    order = np.lexsort((np.arange(users.size), -preds, users))
    u_sorted = users[order]
    bounds = np.r_[0, np.nonzero(u_sorted[1:] != u_sorted[:-1])[0] + 1, users.size]
    scores = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        g = gains[order[a:b]]
        n_pos = int(g.sum())
        if n_pos == 0:
            continue
        ideal = _dcg(np.ones(n_pos), k)
        scores.append(_dcg(g, k) / ideal)
    if not scores:
        raise DomainError("no user has a positive label")
    return float(np.mean(scores))


def binarize(ratings, threshold: float = POSITIVE_THRESHOLD) -> np.ndarray:
    return (np.asarray(ratings, dtype=np.float64) >= threshold).astype(np.int8)


@dataclass
class EvalSet:
    """Held-out triples.  ``labels`` are binary; ``scaled`` are ratings mapped to [0, 1] for MSE."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    scaled: Optional[np.ndarray] = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.scaled is None:
            self.scaled = self.labels
        else:
            self.scaled = np.asarray(self.scaled, dtype=np.float64)
        n = self.users.size
        if not (self.items.size == self.labels.size == self.scaled.size == n):
            raise ValueError("EvalSet arrays must have equal length")

    def __len__(self):
        return int(self.users.size)


def evaluate(preds, data: EvalSet, ks: Sequence[int] = (5, 10)) -> Dict[str, float]:
    preds = np.asarray(preds, dtype=np.float64)
    out = {"MSE": mse(preds, data.scaled), "AUC": auc(preds, data.labels)}
    for k in ks:
        out[f"NDCG@{k}"] = ndcg_at_k(data.users, preds, data.labels, k)
    return out
