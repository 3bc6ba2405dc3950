"""Clustering agreement metrics against independent oracles.

The oracles here are deliberately written from first principles rather than
mirroring the implementation: ARI from raw pair iteration, expected mutual
information from brute-force enumeration of point permutations (small n) and
an exact hypergeometric sum (written with math.comb), completeness from joint
counts.  sklearn serves as an extra cross-check on random instances.
"""

import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from sklearn.metrics import (adjusted_mutual_info_score, adjusted_rand_score,
                             completeness_score)

from spotfusion.errors import EmptyResult, RowMisalignment
from spotfusion.metrics import (contingency_table, evaluate_labels, metric_ami,
                                metric_ari, metric_completeness)
from spotfusion.rng import SeededRng


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def oracle_ari(pred, true):
    """Pair-counting ARI: iterate all point pairs, classify agreement."""
    n = len(pred)
    a = b = c = d = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_p = pred[i] == pred[j]
            same_t = true[i] == true[j]
            if same_p and same_t:
                a += 1
            elif same_t:
                b += 1
            elif same_p:
                c += 1
            else:
                d += 1
    denom = (a + b) * (b + d) + (a + c) * (c + d)
    if denom == 0:
        return 1.0
    return 2.0 * (a * d - b * c) / denom


def mutual_information(pred, true):
    n = len(pred)
    joint = {}
    for p, t in zip(pred, true):
        joint[(p, t)] = joint.get((p, t), 0) + 1
    pa = {}
    pb = {}
    for p in pred:
        pa[p] = pa.get(p, 0) + 1
    for t in true:
        pb[t] = pb.get(t, 0) + 1
    mi = 0.0
    for (p, t), nij in joint.items():
        mi += (nij / n) * math.log(n * nij / (pa[p] * pb[t]))
    return mi


def entropy(labels):
    n = len(labels)
    counts = {}
    for v in labels:
        counts[v] = counts.get(v, 0) + 1
    return -sum((c / n) * math.log(c / n) for c in counts.values())


@lru_cache(maxsize=None)
def emi_permutations(marg_a: tuple, marg_b: tuple) -> float:
    """E[MI] under a uniformly random bijection between the two labelings.

    Brute force over every permutation of the points; feasible for n <= 6.
    """
    n = sum(marg_a)
    assert sum(marg_b) == n and n <= 6
    la = [i for i, m in enumerate(marg_a) for _ in range(m)]
    lb = [j for j, m in enumerate(marg_b) for _ in range(m)]
    total = 0.0
    count = 0
    for perm in itertools.permutations(range(n)):
        total += mutual_information(la, [lb[p] for p in perm])
        count += 1
    return total / count


@lru_cache(maxsize=None)
def emi_hypergeometric(marg_a: tuple, marg_b: tuple) -> float:
    """Exact E[MI] for fixed margins via the hypergeometric cell distribution."""
    n = sum(marg_a)
    emi = 0.0
    for ai in marg_a:
        for bj in marg_b:
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                p = (math.comb(bj, nij) * math.comb(n - bj, ai - nij)
                     / math.comb(n, ai))
                emi += p * (nij / n) * math.log(n * nij / (ai * bj))
    return emi


def oracle_ami(pred, true, emi_fn):
    marg_a = tuple(sorted(np.unique(pred, return_counts=True)[1].tolist()))
    marg_b = tuple(sorted(np.unique(true, return_counts=True)[1].tolist()))
    mi = mutual_information(list(pred), list(true))
    emi = emi_fn(marg_a, marg_b)
    normal = 0.5 * (entropy(list(pred)) + entropy(list(true)))
    denom = normal - emi
    if abs(denom) < 1e-12:
        return 1.0
    return (mi - emi) / denom


def oracle_completeness(pred, true):
    """1 iff every true class is contained in one predicted cluster."""
    n = len(pred)
    h_pred = entropy(list(pred))
    if h_pred < 1e-12:
        return 1.0
    joint = {}
    tb = {}
    for p, t in zip(pred, true):
        joint[(p, t)] = joint.get((p, t), 0) + 1
        tb[t] = tb.get(t, 0) + 1
    h_cond = -sum((nij / n) * math.log(nij / tb[t]) for (p, t), nij in joint.items())
    return 1.0 - h_cond / h_pred


def partitions_up_to(n, max_blocks):
    """All labelings of n points with at most max_blocks clusters, one per
    set partition (restricted growth strings)."""
    out = []

    def grow(prefix, used):
        if len(prefix) == n:
            out.append(tuple(prefix))
            return
        for v in range(min(used + 1, max_blocks)):
            grow(prefix + [v], max(used, v + 1))

    grow([], 0)
    return out


# ---------------------------------------------------------------------------
# Pinned examples
# ---------------------------------------------------------------------------

def test_ari_crossed_pairs():
    assert metric_ari([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5


def test_identical_labelings_score_one():
    rep = evaluate_labels([2, 0, 0, 1, 1], [5, 9, 9, 7, 7])
    assert rep.ari == 1.0 and rep.ami == 1.0 and rep.completeness == 1.0


def test_ami_single_cluster_pred_is_zero():
    assert metric_ami([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0


def test_completeness_crossed_pairs_is_zero():
    assert abs(metric_completeness([0, 1, 0, 1], [0, 0, 1, 1])) < 1e-12


def test_completeness_single_pred_cluster_is_one():
    assert metric_completeness([0, 0, 0, 0], [0, 0, 1, 1]) == 1.0


def test_completeness_merging_true_classes_keeps_one():
    # both true classes each sit inside a single predicted cluster
    assert metric_completeness([0, 0, 0, 0, 1, 1], [0, 0, 1, 1, 2, 2]) == 1.0


def test_string_labels_accepted():
    rep = evaluate_labels(["a", "a", "b"], ["x", "x", "y"])
    assert rep.ari == 1.0
    assert rep.n_clusters_pred == 2 and rep.n_clusters_true == 2


def test_contingency_table_shape_and_counts():
    table = contingency_table([0, 0, 1, 2], [1, 1, 0, 0])
    assert table.shape == (3, 2)
    assert table.sum() == 4
    assert table[0, 1] == 2


def test_contingency_errors():
    with pytest.raises(RowMisalignment):
        contingency_table([0, 1], [0, 1, 2])
    with pytest.raises(EmptyResult):
        contingency_table([], [])


# ---------------------------------------------------------------------------
# Oracle agreement
# ---------------------------------------------------------------------------

def test_hypergeometric_emi_equals_permutation_emi():
    # validates the closed-form oracle itself before it is trusted at n=7,8
    for n in range(2, 7):
        parts = set()
        for labeling in partitions_up_to(n, 3):
            parts.add(tuple(sorted(np.unique(labeling, return_counts=True)[1].tolist())))
        for ma in parts:
            for mb in parts:
                assert abs(emi_hypergeometric(ma, mb)
                           - emi_permutations(ma, mb)) < 1e-12


def test_enumeration_small_n_against_oracles():
    # every pair of set partitions with <= 3 blocks, n <= 6
    for n in range(2, 7):
        partitions = partitions_up_to(n, 3)
        for pred in partitions:
            for true in partitions:
                p = list(pred)
                t = list(true)
                assert abs(metric_ari(p, t) - oracle_ari(p, t)) < 1e-9
                assert abs(metric_ami(p, t) - oracle_ami(p, t, emi_permutations)) < 1e-9
                assert abs(metric_completeness(p, t) - oracle_completeness(p, t)) < 1e-9


def labelings_from_table(table):
    """Any labeling pair realizing the table (metrics depend only on it)."""
    pred = []
    true = []
    for i, row in enumerate(table):
        for j, nij in enumerate(row):
            pred.extend([i] * nij)
            true.extend([j] * nij)
    return pred, true


def tables_summing_to(n, rows, cols):
    """All rows x cols nonnegative integer tables with total n."""
    cells = rows * cols
    for cuts in itertools.combinations(range(n + cells - 1), cells - 1):
        flat = []
        prev = -1
        for c in cuts:
            flat.append(c - prev - 1)
            prev = c
        flat.append(n + cells - 2 - prev)
        yield np.array(flat).reshape(rows, cols)


def test_enumeration_n7_n8_against_oracles():
    # labelings with <= 3 clusters on each side are covered by enumerating
    # all 3x3 contingency tables with the right total; metrics are functions
    # of the table alone
    for n in (7, 8):
        for table in tables_summing_to(n, 3, 3):
            pred, true = labelings_from_table(table)
            assert abs(metric_ari(pred, true) - oracle_ari(pred, true)) < 1e-9
            assert abs(metric_ami(pred, true)
                       - oracle_ami(pred, true, emi_hypergeometric)) < 1e-9
            assert abs(metric_completeness(pred, true)
                       - oracle_completeness(pred, true)) < 1e-9


def test_metrics_match_sklearn_on_random_instances():
    gen = SeededRng(77)
    for _ in range(200):
        n = int(gen.integers(2, 40))
        pred = gen.integers(0, int(gen.integers(1, 6)), size=n)
        true = gen.integers(0, int(gen.integers(1, 6)), size=n)
        assert abs(metric_ari(pred, true) - adjusted_rand_score(true, pred)) < 1e-10
        assert abs(metric_ami(pred, true)
                   - adjusted_mutual_info_score(true, pred)) < 1e-10
        assert abs(metric_completeness(pred, true)
                   - completeness_score(true, pred)) < 1e-10


def test_permutation_invariance():
    gen = SeededRng(78)
    pred = gen.integers(0, 4, size=30)
    true = gen.integers(0, 3, size=30)
    remap = {0: 7, 1: 3, 2: 9, 3: 0}
    pred2 = np.array([remap[v] for v in pred])
    # relabeling reorders the contingency rows, so float sums can differ in
    # the last ulp; ARI is exact integer arithmetic
    assert metric_ari(pred, true) == metric_ari(pred2, true)
    assert abs(metric_ami(pred, true) - metric_ami(pred2, true)) < 1e-12
    assert abs(metric_completeness(pred, true)
               - metric_completeness(pred2, true)) < 1e-12


def test_report_fields():
    rep = evaluate_labels([0, 1, 1], [1, 1, 0])
    assert rep.n_spots == 3
    d = rep.to_dict()
    assert set(d) == {"ari", "ami", "completeness", "n_spots",
                      "n_clusters_pred", "n_clusters_true"}
