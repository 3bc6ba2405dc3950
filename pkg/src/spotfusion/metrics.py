"""Clustering agreement metrics: adjusted Rand index, adjusted mutual
information, and completeness.

All three are computed from the contingency table of the two labelings and are
invariant to label permutation.  AMI uses the exact hypergeometric expected
mutual information and natural logarithms, normalized by the arithmetic mean
of the two entropies (several conventions exist; this one is fixed here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyResult, RowMisalignment

_SINGULAR = 1e-12


@dataclass
class MetricsReport:
    ari: float
    ami: float
    completeness: float
    n_spots: int
    n_clusters_pred: int
    n_clusters_true: int

    def to_dict(self) -> dict:
        return {
            "ari": self.ari,
            "ami": self.ami,
            "completeness": self.completeness,
            "n_spots": self.n_spots,
            "n_clusters_pred": self.n_clusters_pred,
            "n_clusters_true": self.n_clusters_true,
        }


def contingency_table(pred, true) -> np.ndarray:
    """Counts[i, j] = number of items with pred label i and true label j."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 1:
        raise RowMisalignment(
            f"label vectors must be 1-d and equal length, got {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise EmptyResult("empty labelings")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    r = int(pi.max()) + 1
    c = int(ti.max()) + 1
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def metric_ari(pred, true) -> float:
    """Adjusted Rand index under the permutation-model chance correction.

    Exact integer pair counting; degenerate tables (both labelings trivial)
    return 1.0.
    """
    table = contingency_table(pred, true)
    n = int(table.sum())
    index = sum(math.comb(int(v), 2) for v in table.ravel())
    sum_a = sum(math.comb(int(v), 2) for v in table.sum(axis=1))
    sum_b = sum(math.comb(int(v), 2) for v in table.sum(axis=0))
    pairs = math.comb(n, 2)
    # work in integers scaled by `pairs` to stay exact
    expected_num = sum_a * sum_b
    numer = index * pairs - expected_num
    denom = (sum_a + sum_b) * pairs - 2 * expected_num
    if denom == 0:
        return 1.0
    return float(2 * numer / denom)


def _entropy(counts, n) -> float:
    counts = counts[counts > 0].astype(np.float64)
    p = counts / n
    return float(-np.sum(p * np.log(p)))


def _mutual_information(table, n) -> float:
    a = table.sum(axis=1).astype(np.float64)
    b = table.sum(axis=0).astype(np.float64)
    mi = 0.0
    rows, cols = np.nonzero(table)
    for i, j in zip(rows, cols):
        nij = float(table[i, j])
        mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    return mi


def expected_mutual_information(table) -> float:
    """Exact E[MI] over tables with the given margins (hypergeometric model)."""
    n = int(table.sum())
    a = [int(v) for v in table.sum(axis=1)]
    b = [int(v) for v in table.sum(axis=0)]
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                p = math.comb(bj, nij) * math.comb(n - bj, ai - nij) / math.comb(n, ai)
                emi += (nij / n) * math.log(n * nij / (ai * bj)) * p
    return emi


def metric_ami(pred, true) -> float:
    """Adjusted mutual information, arithmetic-mean normalizer, natural logs.

    (MI - E[MI]) / (mean(H_pred, H_true) - E[MI]).  When the denominator
    vanishes every table with these margins carries full information, so the
    labelings are equivalent and the value is 1.0 by convention.
    """
    table = contingency_table(pred, true)
    n = int(table.sum())
    h_pred = _entropy(table.sum(axis=1), n)
    h_true = _entropy(table.sum(axis=0), n)
    mi = _mutual_information(table, n)
    emi = expected_mutual_information(table)
    normalizer = 0.5 * (h_pred + h_true)
    denom = normalizer - emi
    if abs(denom) < _SINGULAR:
        return 1.0
    return float((mi - emi) / denom)


def metric_completeness(pred, true) -> float:
    """1 - H(pred|true)/H(pred); scores 1 exactly when every true class sits
    inside a single predicted cluster.  Defined as 1.0 when H(pred) = 0 (a
    lone predicted cluster trivially contains everything)."""
    table = contingency_table(pred, true)
    n = int(table.sum())
    h_pred = _entropy(table.sum(axis=1), n)
    if h_pred < _SINGULAR:
        return 1.0
    true_sizes = table.sum(axis=0).astype(np.float64)
    h_cond = 0.0
    rows, cols = np.nonzero(table)
    for i, j in zip(rows, cols):
        nij = float(table[i, j])
        h_cond -= (nij / n) * math.log(nij / true_sizes[j])
    return float(1.0 - h_cond / h_pred)


def evaluate_labels(pred, true) -> MetricsReport:
    table = contingency_table(pred, true)
    return MetricsReport(
        ari=metric_ari(pred, true),
        ami=metric_ami(pred, true),
        completeness=metric_completeness(pred, true),
        n_spots=int(table.sum()),
        n_clusters_pred=table.shape[0],
        n_clusters_true=table.shape[1],
    )
