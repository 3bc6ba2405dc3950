"""Dense numerics kernels: k-means, PCA, diagonal EM-GMM, gradient checking."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotfusion.errors import DimensionMismatch, NonFinite, TooFewPoints
from spotfusion.numerics import (GmmModel, gmm_em_fit, gmm_posteriors, gradient_check,
                                 kmeans_fit, logsumexp_rows, one_hot, pairwise_sq_dists,
                                 pca_fit_transform, require_finite)
from spotfusion.rng import SeededRng


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def test_require_finite_passes_and_raises():
    require_finite(np.arange(4.0))
    with pytest.raises(NonFinite):
        require_finite(np.array([1.0, np.nan]))
    with pytest.raises(NonFinite):
        require_finite(np.array([np.inf]))


def test_pairwise_sq_dists_matches_brute_force(rng):
    a = rng.normal(size=(7, 3))
    b = rng.normal(size=(5, 3))
    d2 = pairwise_sq_dists(a, b)
    brute = np.array([[np.sum((ai - bj) ** 2) for bj in b] for ai in a])
    assert np.allclose(d2, brute, atol=1e-10)
    assert np.all(d2 >= 0.0)


def test_pairwise_sq_dists_self_nonnegative_on_near_duplicates():
    # the expanded form can go slightly negative without the clamp
    a = np.full((4, 6), 1e8)
    a[1] += 1e-4
    assert np.all(pairwise_sq_dists(a, a) >= 0.0)


def test_logsumexp_rows_matches_naive(rng):
    logp = rng.normal(size=(6, 4))
    assert np.allclose(logsumexp_rows(logp), np.log(np.sum(np.exp(logp), axis=1)),
                       atol=1e-12)


def test_logsumexp_rows_handles_large_magnitudes():
    logp = np.array([[1000.0, 1000.0], [-1000.0, -999.0]])
    out = logsumexp_rows(logp)
    assert np.isfinite(out).all()
    assert np.isclose(out[0], 1000.0 + np.log(2.0))


def test_one_hot_rows():
    y = one_hot(np.array([2, 0, 1]), 3)
    assert np.array_equal(y, np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=float))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def test_kmeans_two_columns_of_points(rng):
    data = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    centers, labels = kmeans_fit(data, 2, rng)
    got = sorted(map(tuple, np.round(centers, 12)))
    assert got == [(0.0, 0.5), (10.0, 0.5)]
    assert labels[0] == labels[1] and labels[2] == labels[3] and labels[0] != labels[2]


def test_kmeans_k_equals_n_zero_sse(rng):
    data = SeededRng(3).normal(size=(6, 2))
    centers, labels = kmeans_fit(data, 6, rng)
    sse = np.sum((data - centers[labels]) ** 2)
    assert sse < 1e-18
    assert sorted(labels.tolist()) == list(range(6))


def test_kmeans_k1_closed_form(rng):
    data = SeededRng(4).normal(size=(9, 3))
    centers, labels = kmeans_fit(data, 1, rng)
    assert np.allclose(centers[0], data.mean(axis=0), atol=1e-12)
    assert np.all(labels == 0)


def test_kmeans_argument_errors(rng):
    data = np.zeros((3, 2))
    with pytest.raises(TooFewPoints):
        kmeans_fit(data, 0, rng)
    with pytest.raises(TooFewPoints):
        kmeans_fit(data, 4, rng)


def test_kmeans_deterministic_under_seed():
    data = SeededRng(9).normal(size=(40, 4))
    c1, l1 = kmeans_fit(data, 3, SeededRng(5))
    c2, l2 = kmeans_fit(data, 3, SeededRng(5))
    assert np.array_equal(c1, c2) and np.array_equal(l1, l2)


def test_kmeans_sse_non_increasing_in_iterations():
    # same seeding, growing iteration budget: Lloyd never worsens the SSE
    data = SeededRng(17).normal(size=(60, 3)) + np.repeat(np.eye(3) * 4, 20, axis=0)
    prev = np.inf
    for it in range(1, 9):
        centers, labels = kmeans_fit(data, 3, SeededRng(0), max_iter=it)
        sse = float(np.sum((data - centers[labels]) ** 2))
        assert sse <= prev + 1e-9
        prev = sse


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def test_pca_full_rank_roundtrip():
    data = SeededRng(21).normal(size=(10, 5))
    scores = pca_fit_transform(data, 5)
    centered = data - data.mean(axis=0)
    # recover the basis: it must be orthonormal and reproduce the data
    basis, *_ = np.linalg.lstsq(scores, centered, rcond=None)
    assert np.allclose(basis @ basis.T, np.eye(5), atol=1e-8)
    assert np.allclose(scores @ basis, centered, atol=1e-8)


def test_pca_rank1_variance_on_first_axis():
    direction = np.array([3.0, 4.0, 0.0]) / 5.0
    weights = np.linspace(-2, 2, 9)[:, None]
    data = weights * direction
    scores = pca_fit_transform(data, 3)
    assert np.allclose(scores[:, 1:], 0.0, atol=1e-12)
    assert np.var(scores[:, 0]) > 0


def test_pca_columns_orthogonal_after_whitening():
    data = SeededRng(22).normal(size=(30, 6))
    scores = pca_fit_transform(data, 6)
    norms = np.linalg.norm(scores, axis=0)
    white = scores / norms
    assert np.allclose(white.T @ white, np.eye(6), atol=1e-8)


def test_pca_component_range_errors():
    data = np.zeros((4, 3))
    with pytest.raises(DimensionMismatch):
        pca_fit_transform(data, 0)
    with pytest.raises(DimensionMismatch):
        pca_fit_transform(data, 4)


def test_pca_deterministic_sign_convention():
    data = SeededRng(23).normal(size=(12, 4))
    assert np.array_equal(pca_fit_transform(data, 4), pca_fit_transform(data, 4))


# ---------------------------------------------------------------------------
# Diagonal-covariance GMM
# ---------------------------------------------------------------------------

def test_gmm_k1_closed_form(rng):
    data = SeededRng(31).normal(size=(50, 3)) * np.array([1.0, 2.0, 0.5])
    model = gmm_em_fit(data, 1, rng)
    assert np.allclose(model.means[0], data.mean(axis=0), atol=1e-9)
    assert np.allclose(model.variances[0], data.var(axis=0), atol=1e-9)
    assert np.isclose(model.weights[0], 1.0)


def test_gmm_separated_blobs_exact_recovery(rng):
    gen = SeededRng(32)
    a = gen.split("a").normal(size=(40, 2))
    b = gen.split("b").normal(size=(40, 2)) + 20.0
    data = np.vstack([a, b])
    truth = np.repeat([0, 1], 40)
    model = gmm_em_fit(data, 2, rng)
    hard = np.argmax(gmm_posteriors(model, data), axis=1)
    # identical up to component permutation
    assert (np.array_equal(hard, truth)
            or np.array_equal(hard, 1 - truth))


def test_gmm_posterior_rows_sum_to_one(rng):
    data = SeededRng(33).normal(size=(25, 2))
    model = gmm_em_fit(data, 3, rng)
    post = gmm_posteriors(model, data)
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(post >= 0)


def test_gmm_log_likelihood_monotone_in_iterations():
    data = SeededRng(34).normal(size=(50, 2))
    data[25:] += 3.0
    prev = -np.inf
    for it in range(1, 9):
        model = gmm_em_fit(data, 2, SeededRng(1), max_iter=it)
        assert model.log_likelihood >= prev - 1e-9
        prev = model.log_likelihood


def test_gmm_too_few_points(rng):
    with pytest.raises(TooFewPoints):
        gmm_em_fit(np.zeros((2, 2)), 3, rng)


def test_gmm_model_validate_rejects_bad_weights():
    model = GmmModel(k=2, means=np.zeros((2, 2)), variances=np.ones((2, 2)),
                     weights=np.array([0.9, 0.3]), log_likelihood=0.0)
    with pytest.raises(AssertionError):
        model.validate()


def test_gmm_collapsed_component_is_reseeded(rng, monkeypatch):
    # adversarial init: one component banished far outside a floored-variance
    # blob, so its responsibility column underflows on the first E step
    import spotfusion.numerics as numerics

    data = SeededRng(35).normal(size=(30, 2)) * 1e-4

    def bad_init(d, k, r, **kw):
        return np.array([[0.0, 0.0], [500.0, 500.0]]), np.zeros(len(d), dtype=np.int64)

    monkeypatch.setattr(numerics, "kmeans_fit", bad_init)
    model = numerics.gmm_em_fit(data, 2, rng)
    model.validate()
    assert np.isfinite(model.log_likelihood)
    assert np.all(np.abs(model.means) < 1.0)  # banished component relocated


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def test_gradient_check_quadratic(rng):
    def fn(p):
        return float(np.sum(p * p)), 2.0 * p

    report = gradient_check(fn, SeededRng(41).normal(size=(80,)), rng=rng)
    assert report.max_rel_error < 1e-7
    assert report.passed()


def test_gradient_check_constant_loss(rng):
    def fn(p):
        return 3.5, np.zeros_like(p)

    report = gradient_check(fn, np.ones(20), rng=rng)
    assert report.max_rel_error == 0.0


def test_gradient_check_detects_wrong_gradient(rng):
    def fn(p):
        return float(np.sum(p * p)), 3.0 * p  # deliberately wrong scale

    report = gradient_check(fn, np.ones(30), rng=rng)
    assert not report.passed()


def test_gradient_check_reports_named_segments(rng):
    def fn(p):
        return float(np.sum(p ** 3)), 3.0 * p ** 2

    names = [("a", 10), ("b", 14)]
    report = gradient_check(fn, SeededRng(43).normal(size=(24,)), rng=rng, names=names)
    assert [n for n, _ in report.per_parameter_errors] == ["a", "b"]
    assert report.n_sampled == 24  # min_samples dominates tiny vectors


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 63 - 1))
def test_kmeans_labels_consistent_with_nearest_center(seed):
    data = SeededRng(seed).normal(size=(20, 2))
    centers, labels = kmeans_fit(data, 3, SeededRng(seed ^ 1))
    d2 = pairwise_sq_dists(data, centers)
    assert np.array_equal(labels, np.argmin(d2, axis=1))
