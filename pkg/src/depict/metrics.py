"""Clustering accuracy, normalized mutual information and PCA projection."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def _as_labels(a, name):
    a = np.asarray(a)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {a.shape}")
    return a


def contingency_table(pred, true) -> np.ndarray:
    """Counts ``C[i, j]`` of samples with predicted label ``i`` and true label ``j``.

    Labels are mapped to ``0..n-1`` in sorted order of their distinct values.
    """
    pred = _as_labels(pred, "pred_labels")
    true = _as_labels(true, "true_labels")
    if len(pred) != len(true):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(true)} labels")
    _, p_idx = np.unique(pred, return_inverse=True)
    _, t_idx = np.unique(true, return_inverse=True)
    table = np.zeros((p_idx.max(initial=-1) + 1, t_idx.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    return table


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect matching; ``perm[i]`` is the column assigned to row ``i``."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm


def best_map(pred, true) -> dict:
    """Cluster -> class mapping maximising agreement (zero-padded to square)."""
    pred = _as_labels(pred, "pred_labels")
    true = _as_labels(true, "true_labels")
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(true, return_inverse=True)
    n = max(len(p_vals), len(t_vals))
    table = np.zeros((n, n), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    perm = hungarian(-table)
    return {p_vals[i]: t_vals[perm[i]] for i in range(len(p_vals)) if perm[i] < len(t_vals)}


def accuracy(pred_labels, true_labels) -> float:
    """Fraction of samples correctly labelled under the best cluster-to-class bijection."""
    table = contingency_table(pred_labels, true_labels)
    if table.size == 0:
        return 0.0
    n = max(table.shape)
    square = np.zeros((n, n), dtype=np.int64)
    square[: table.shape[0], : table.shape[1]] = table
    perm = hungarian(-square)
    return float(square[np.arange(n), perm].sum()) / table.sum()


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalised by the arithmetic mean of the two entropies."""
    table = contingency_table(labels_a, labels_b).astype(float)
    n = table.sum()
    if n == 0:
        return 0.0
    h_a = _entropy(table.sum(axis=1))
    h_b = _entropy(table.sum(axis=0))
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    pij = table / n
    outer = np.outer(pij.sum(axis=1), pij.sum(axis=0))
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    denom = 0.5 * (h_a + h_b)
    return float(np.clip(mi / denom, 0.0, 1.0)) if denom > 0 else 0.0


def pca_project(z, components=2) -> np.ndarray:
    """Project mean-centred rows onto the leading principal directions.

    Each direction's sign is fixed so that its largest-magnitude loading is
    positive. Zero-variance input maps to all zeros.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or len(z) < 2:
        raise ValueError(f"need an (N >= 2, D) array, got shape {z.shape}")
    centred = z - z.mean(axis=0)
    out = np.zeros((len(z), components))
    if not np.any(centred):
        return out
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    m = min(components, vt.shape[0])
    vt = vt[:m]
    flip = np.sign(vt[np.arange(m), np.argmax(np.abs(vt), axis=1)])
    vt = vt * flip[:, None]
    out[:, :m] = centred @ vt.T
    return out
