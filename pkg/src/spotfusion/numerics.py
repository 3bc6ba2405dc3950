"""Dense numerical building blocks: k-means, PCA, diagonal-covariance EM-GMM,
and a finite-difference gradient checker.

Everything works on float64 numpy arrays and is deterministic given a
SeededRng.  Sizes are desk-scale (thousands of rows), so algorithms favour
clarity and exact tie-breaking over asymptotic tricks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateCluster, DimensionMismatch, NonFinite,
                     TooFewPoints)
from .rng import SeededRng

VAR_FLOOR = 1e-6


def require_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (m,d) and b (n,d)."""
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def logsumexp_rows(logp: np.ndarray) -> np.ndarray:
    m = np.max(logp, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(logp - m), axis=1, keepdims=True)))[:, 0]


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _weighted_pick(weights: np.ndarray, rng: SeededRng) -> int:
    """Pick an index with probability proportional to ``weights``.

    Falls back to the lowest-index positive entry only if total mass is zero
    (all remaining points coincide with existing centers).
    """
    total = float(np.sum(weights))
    if total <= 0.0:
        return 0
    r = rng.random() * total
    return int(np.searchsorted(np.cumsum(weights), r, side="right").clip(0, len(weights) - 1))


def _kmeans_pp_init(data: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = data[first]
    d2 = pairwise_sq_dists(data, centers[:1])[:, 0]
    for j in range(1, k):
        idx = _weighted_pick(d2, rng)
        centers[j] = data[idx]
        d2 = np.minimum(d2, pairwise_sq_dists(data, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(data: np.ndarray, centers: np.ndarray, max_iter: int):
    n, k = data.shape[0], centers.shape[0]
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = pairwise_sq_dists(data, centers)
        new_labels = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        # re-seed empty clusters to the point farthest from its assigned center
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            cur = d2[np.arange(n), new_labels]
            far = int(np.argmax(cur))
            centers[j] = data[far]
            new_labels[far] = j
            d2[:, j] = pairwise_sq_dists(data, centers[j : j + 1])[:, 0]
            cur = None
            counts = np.bincount(new_labels, minlength=k)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = data[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d2 = pairwise_sq_dists(data, centers)
    labels = np.argmin(d2, axis=1)
    sse = float(np.sum(d2[np.arange(n), labels]))
    return centers, labels, sse


def kmeans_fit(data: np.ndarray, k: int, rng: SeededRng, *, n_restarts: int = 5,
               max_iter: int = 300):
    """Lloyd's k-means with k-means++ seeding.

    Runs ``n_restarts`` independent seedings and keeps the lowest-SSE result
    (first restart wins ties).  Empty clusters are re-seeded to the point
    farthest from its current center.

    :returns: (centroids (k,d), labels (n,))
    """
    data = np.asarray(data, dtype=np.float64)
    require_finite(data, "kmeans input")
    n = data.shape[0]
    if k < 1:
        raise TooFewPoints(f"k must be >= 1, got {k}")
    if n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    if k == 1:
        center = data.mean(axis=0, keepdims=True)
        return center, np.zeros(n, dtype=np.int64)
    best = None
    for r in range(n_restarts):
        sub = rng.split(f"restart{r}")
        centers = _kmeans_pp_init(data, k, sub)
        centers, labels, sse = _lloyd(data, centers.copy(), max_iter)
        if best is None or sse < best[2]:
            best = (centers, labels, sse)
    return best[0], best[1].astype(np.int64)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def pca_fit_transform(data: np.ndarray, components: int) -> np.ndarray:
    """Project column-centered data onto its top principal components.

    Components are ordered by descending singular value.  Each principal axis
    is oriented so its largest-magnitude loading is positive; axes beyond the
    data rank yield exactly-zero score columns.
    """
    data = np.asarray(data, dtype=np.float64)
    require_finite(data, "pca input")
    n, g = data.shape
    if components < 1 or components > min(n, g):
        raise DimensionMismatch(
            f"components must be in [1, min(n_spots, n_genes)] = [1, {min(n, g)}], got {components}")
    centered = data - data.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    vt = vt[:components]
    s = s[:components]
    flip = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    scores = centered @ vt.T
    tol = (s[0] if s.size else 0.0) * 1e-12
    scores[:, s <= tol] = 0.0
    return scores


# ---------------------------------------------------------------------------
# Gaussian mixture (diagonal covariance)
# ---------------------------------------------------------------------------

@dataclass
class GmmModel:
    k: int
    means: np.ndarray        # (k, d)
    variances: np.ndarray    # (k, d), diagonal covariances
    weights: np.ndarray      # (k,), sums to 1
    log_likelihood: float

    def validate(self):
        assert self.means.shape == self.variances.shape == (self.k, self.means.shape[1])
        assert np.all(self.variances >= VAR_FLOOR * (1 - 1e-12))
        assert abs(float(self.weights.sum()) - 1.0) < 1e-9


def _gmm_log_prob(data, means, variances, weights):
    # log N(x | mu_k, diag(var_k)) + log w_k for every point/component pair
    n, d = data.shape
    log_det = np.sum(np.log(variances), axis=1)
    out = np.empty((n, means.shape[0]))
    for j in range(means.shape[0]):
        diff = data - means[j]
        maha = np.sum(diff * diff / variances[j], axis=1)
        out[:, j] = -0.5 * (maha + log_det[j] + d * np.log(2.0 * np.pi)) + np.log(weights[j])
    return out


def gmm_posteriors(model: GmmModel, data: np.ndarray) -> np.ndarray:
    """Responsibilities under the model; rows sum to 1."""
    logp = _gmm_log_prob(np.asarray(data, dtype=np.float64), model.means,
                         model.variances, model.weights)
    logp -= logsumexp_rows(logp)[:, None]
    return np.exp(logp)


def gmm_em_fit(data: np.ndarray, k: int, rng: SeededRng, *, max_iter: int = 200,
               tol: float = 1e-6, var_floor: float = VAR_FLOOR) -> GmmModel:
    """Fit a diagonal-covariance Gaussian mixture by EM.

    Initialized from k-means.  Stops when the total log-likelihood improves by
    less than ``tol`` or after ``max_iter`` iterations.  A component whose
    responsibility mass collapses below 1e-12 is re-seeded once (to the point
    the model currently explains worst); a second collapse raises
    DegenerateCluster.
    """
    data = np.asarray(data, dtype=np.float64)
    require_finite(data, "gmm input")
    n, d = data.shape
    if n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    centers, labels = kmeans_fit(data, k, rng.split("init"))
    means = centers.copy()
    variances = np.empty((k, d))
    weights = np.empty(k)
    for j in range(k):
        members = data[labels == j]
        if len(members):
            variances[j] = np.maximum(members.var(axis=0), var_floor)
            weights[j] = len(members) / n
        else:
            variances[j] = np.maximum(data.var(axis=0), var_floor)
            weights[j] = 1.0 / n
    weights = weights / weights.sum()

    reseeded = False
    prev_ll = -np.inf
    ll = prev_ll
    for _ in range(max_iter):
        logp = _gmm_log_prob(data, means, variances, weights)
        row_ls = logsumexp_rows(logp)
        ll = float(np.sum(row_ls))
        resp = np.exp(logp - row_ls[:, None])
        mass = resp.sum(axis=0)
        dead = np.flatnonzero(mass < 1e-12)
        if dead.size:
            if reseeded:
                raise DegenerateCluster(
                    f"component(s) {dead.tolist()} collapsed twice during EM")
            reseeded = True
            worst = np.argsort(row_ls)  # points the model explains worst first
            for pos, j in enumerate(dead):
                means[j] = data[worst[pos % n]]
                variances[j] = np.maximum(data.var(axis=0), var_floor)
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            prev_ll = -np.inf
            continue
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            prev_ll = ll
            break
        prev_ll = ll
        # M step
        means = (resp.T @ data) / mass[:, None]
        for j in range(k):
            diff = data - means[j]
            variances[j] = np.maximum((resp[:, j] @ (diff * diff)) / mass[j], var_floor)
        weights = mass / n
    model = GmmModel(k=k, means=means, variances=variances, weights=weights,
                     log_likelihood=prev_ll if np.isfinite(prev_ll) else ll)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter_errors: list  # (name, max rel error over sampled entries)
    n_sampled: int

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def gradient_check(fn, params: np.ndarray, *, epsilon: float = 1e-4,
                   rng: SeededRng, names=None, sample_fraction: float = 0.05,
                   min_samples: int = 50) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    :param fn: callable mapping a flat parameter vector to (loss, grad).
    :param params: flat float64 parameter vector (evaluation point).
    :param names: optional list of (name, size) segments describing the vector;
        per-parameter errors are reported per segment.

    A random subsample of max(min_samples, 5%) entries is probed.  Relative
    error uses max(|analytic|, |fd|, 1e-8) in the denominator.
    """
    params = np.asarray(params, dtype=np.float64)
    p = params.size
    _, analytic = fn(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise DimensionMismatch("analytic gradient shape does not match parameters")
    n_probe = min(p, max(min_samples, int(np.ceil(sample_fraction * p))))
    idx = np.sort(rng.permutation(p)[:n_probe])
    rel = np.zeros(n_probe)
    for t, i in enumerate(idx):
        bump = np.zeros(p)
        bump[i] = epsilon
        lp = fn(params + bump)[0]
        lm = fn(params - bump)[0]
        fd = (lp - lm) / (2.0 * epsilon)
        a = analytic[i]
        rel[t] = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
    segments = names or [("params", p)]
    per = []
    start = 0
    for name, size in segments:
        in_seg = (idx >= start) & (idx < start + size)
        per.append((name, float(rel[in_seg].max()) if np.any(in_seg) else 0.0))
        start += size
    return GradCheckReport(max_rel_error=float(rel.max() if n_probe else 0.0),
                           per_parameter_errors=per, n_sampled=int(n_probe))
