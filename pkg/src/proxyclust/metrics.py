"""Clustering metrics: accuracy under label matching and mutual information."""

import numpy as np
from scipy.optimize import linear_sum_assignment


def _check_labels(pred, true):
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"label arrays differ in length: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("empty label arrays")
    return pred, true


def contingency(pred, true):
    """Count matrix n[i, j] = #{pred == cluster_i and true == class_j}."""
    pred, true = _check_labels(pred, true)
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    t_ids, t_inv = np.unique(true, return_inverse=True)
    table = np.zeros((len(p_ids), len(t_ids)), dtype=np.int64)
    np.add.at(table, (p_inv, t_inv), 1)
    return table, p_ids, t_ids


def acc(pred, true, strict=True):
    """Accuracy under the best one-to-one cluster/class matching.

    One-to-one mode requires the same number of distinct clusters and
    classes; the optimal bijection is found by solving the assignment
    problem on the contingency table.  strict=False accepts a collapsed
    prediction (fewer clusters than classes) and matches what it can,
    which training-curve logging needs before the head has separated.
    """
    table, p_ids, t_ids = contingency(pred, true)
    if strict and len(p_ids) != len(t_ids):
        raise ValueError(
            f"one-to-one matching needs equal counts, got {len(p_ids)} clusters "
            f"and {len(t_ids)} classes"
        )
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / float(table.sum())


def acc_many_to_one(pred, true):
    """Accuracy when each cluster maps to its majority class (ties: lowest id)."""
    table, p_ids, t_ids = contingency(pred, true)
    # argmax picks the first (lowest-id) column on ties
    best = table.argmax(axis=1)
    return float(table[np.arange(len(p_ids)), best].sum()) / float(table.sum())


def _entropy(counts):
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(pred, true, average="geometric"):
    """Normalized mutual information between partitions.

    I(pred; true) divided by the geometric mean of the marginal entropies
    (default) or the arithmetic mean with ``average="arithmetic"``.  If either
    partition is constant the score is defined as 0.
    """
    if average not in ("geometric", "arithmetic"):
        raise ValueError(f"unknown average: {average!r}")
    table, _, _ = contingency(pred, true)
    n = table.sum()
    h_p = _entropy(table.sum(axis=1).astype(np.float64))
    h_t = _entropy(table.sum(axis=0).astype(np.float64))
    if h_p == 0.0 or h_t == 0.0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    if average == "geometric":
        denom = np.sqrt(h_p * h_t)
    else:
        denom = 0.5 * (h_p + h_t)
    return float(max(0.0, mi / denom))
