"""Cluster-to-state matching and clustering / dynamics metrics.

Labels are 1-based throughout. Predicted major clusters ``1..K-1`` are
mapped onto ground-truth major states; anything unmatched, and the
remainder class, maps to the ground-truth remainder id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .connsim import from_upper_triangle


@dataclass
class ClusterMatching:
    mapping: dict[int, int]  # predicted id -> true id
    remainder: int  # true id used for the remainder / unmatched clusters

    def apply(self, pred) -> np.ndarray:
        pred = np.asarray(pred)
        out = np.full(pred.shape, self.remainder, dtype=np.int64)
        for p, t in self.mapping.items():
            out[pred == p] = t
        return out


def _offdiag_distance(a, b):
    R = a.shape[-1]
    mask = ~np.eye(R, dtype=bool)
    d = (a - b)[..., mask]
    return np.sqrt((d * d).sum(axis=-1))


def frobenius_cost(cluster_means, communities) -> np.ndarray:
    """Off-diagonal Frobenius distance between every cluster mean and every community matrix."""
    cm = np.asarray(cluster_means, dtype=np.float64)
    cs = np.asarray(communities, dtype=np.float64)
    if cm.ndim != 3 or cs.ndim != 3 or cm.shape[1:] != cs.shape[1:]:
        raise ValueError(f"matrix dimensions differ: {cm.shape} vs {cs.shape}")
    return _offdiag_distance(cm[:, None], cs[None, :])


def match_clusters_frobenius(cluster_means, communities, remainder: int | None = None) -> ClusterMatching:
    """Optimal one-to-one link of cluster mean matrices to community matrices.

    Cluster ``i`` (0-based row) is predicted id ``i + 1``; community row
    ``j`` is true state ``j + 1``. Rows of ``cluster_means`` that are all
    NaN (empty clusters) are linked last.
    """
    cost = frobenius_cost(cluster_means, communities)
    if len(cost) == 0:
        raise ValueError("need at least one cluster")
    bad = ~np.isfinite(cost)
    if bad.any():
        cost = np.where(bad, np.nanmax(np.where(bad, np.nan, cost), initial=0.0) * 10 + 1e6, cost)
    rows, cols = linear_sum_assignment(cost)
    n_true = cost.shape[1]
    return ClusterMatching(
        {int(r) + 1: int(c) + 1 for r, c in zip(rows, cols)},
        n_true + 1 if remainder is None else remainder,
    )


def contingency(pred, true, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    true = np.asarray(true)
    for arr in (pred, true):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise ValueError(f"label out of range 1..{n_classes}")
    table = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(table, (pred - 1, true - 1), 1)
    return table


def match_clusters_hungarian_labels(pred, true, n_classes: int) -> ClusterMatching:
    """Permutation of major ids ``1..n_classes-1`` maximising agreement; class ``n_classes`` stays fixed."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("label arrays differ in length")
    table = contingency(pred, true, n_classes)
    major = table[:-1, :-1]
    rows, cols = linear_sum_assignment(-major)
    mapping = {int(r) + 1: int(c) + 1 for r, c in zip(rows, cols)}
    mapping[n_classes] = n_classes
    return ClusterMatching(mapping, n_classes)


def clustering_accuracy(pred, true, matching: ClusterMatching) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("label arrays differ in length")
    if pred.size == 0:
        raise ValueError("no labels")
    return float(np.mean(matching.apply(pred) == true))


def run_lengths(seq) -> tuple[np.ndarray, np.ndarray]:
    """``(state, length)`` of every maximal constant run."""
    s = np.asarray(seq)
    if s.size == 0:
        raise ValueError("empty sequence")
    change = np.flatnonzero(s[1:] != s[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(s)]])
    return s[starts], ends - starts


def mean_dwell_time(seq) -> tuple[dict[int, float], float]:
    """Per-state mean run length and the mean over all runs."""
    states, lengths = run_lengths(seq)
    per_state = {int(k): float(lengths[states == k].mean()) for k in np.unique(states)}
    return per_state, float(lengths.mean())


def occupancy_rate(seq, states=None) -> dict[int, float]:
    """Fraction of time points in each state; ``states`` lists ids to report (default: those present)."""
    s = np.asarray(seq)
    if s.size == 0:
        raise ValueError("empty sequence")
    ids = np.unique(s) if states is None else states
    return {int(k): float(np.count_nonzero(s == k)) / s.size for k in ids}


def strong_correlation_count(samples, threshold: float = 0.5) -> int:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return int(np.count_nonzero(np.abs(np.asarray(samples)) >= threshold))


def to_remainder_truth(labels, n_major: int) -> np.ndarray:
    """Collapse every minor state onto the single remainder id ``n_major + 1``."""
    labels = np.asarray(labels)
    return np.where(labels > n_major, n_major + 1, labels)


def cluster_mean_matrices(vectors, labels, n_clusters: int) -> np.ndarray:
    """Average full correlation matrix per cluster id ``1..n_clusters``; NaN for empty clusters."""
    v = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    R = from_upper_triangle(v[:1]).shape[-1]
    out = np.full((n_clusters, R, R), np.nan)
    for k in range(1, n_clusters + 1):
        members = v[labels == k]
        if len(members):
            out[k - 1] = from_upper_triangle(members.mean(axis=0))
    return out


def confusion_matrix(pred, true, n_classes: int) -> np.ndarray:
    """Rows: true class, columns: predicted class."""
    return contingency(np.asarray(pred), np.asarray(true), n_classes).T
