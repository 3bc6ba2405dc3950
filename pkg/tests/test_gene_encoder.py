"""Masked dual-branch autoencoder: layers, losses, alignment term, training."""

import numpy as np
import pytest

from spotfusion.errors import (DimensionMismatch, RowMisalignment,
                               SampleTooSmall)
from spotfusion.gene_encoder import (BN_EPS, EncoderParams, GanParams,
                                     MaskState, Stage1Config, apply_additive_mask,
                                     decode_adjacency, decode_expression,
                                     decoder_backward, decoder_forward,
                                     discriminator_forward,
                                     discriminator_loss_and_grads, encode,
                                     fisher_mmd, latent_moment_kl, loss_graph,
                                     loss_mask, loss_reconstruction,
                                     sample_mask, stage1_loss_and_grads,
                                     train_stage1)
from spotfusion.numerics import gradient_check
from spotfusion.rng import SeededRng
from spotfusion.spatial_graph import SpatialGraph

from helpers import make_flat_objective, tiny_instance


def single_spot_graph():
    return SpatialGraph(adjacency=np.ones((1, 1)), normalized=np.ones((1, 1)),
                        degrees=np.ones(1), k=0)


def identity_graph(n):
    eye = np.eye(n)
    return SpatialGraph(adjacency=eye.copy(), normalized=eye.copy(),
                        degrees=np.ones(n), k=0)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

def test_sample_mask_count_is_rounded_fraction():
    rng = SeededRng(1)
    assert sample_mask(10, 0.8, rng).size == 8
    assert sample_mask(10, 0.0, rng).size == 0
    assert sample_mask(10, 1.0, rng).size == 10
    assert sample_mask(7, 0.5, rng).size == 4   # round(3.5) -> 4 (half-even? no: 3.5 -> 4)


def test_sample_mask_sorted_unique_in_range():
    idx = sample_mask(50, 0.6, SeededRng(2))
    assert np.all(np.diff(idx) > 0)
    assert idx.min() >= 0 and idx.max() < 50
    with pytest.raises(DimensionMismatch):
        sample_mask(10, 1.2, SeededRng(3))


def test_additive_mask_identities():
    x = SeededRng(4).normal(0.0, 1.0, size=(6, 5))
    none = MaskState(indices=np.array([], dtype=np.int64),
                     perturbation=np.ones(5), ratio=0.0)
    np.testing.assert_array_equal(apply_additive_mask(x, none), x)

    zero_m = MaskState(indices=np.array([1, 3]), perturbation=np.zeros(5), ratio=0.3)
    np.testing.assert_array_equal(apply_additive_mask(x, zero_m), x)

    st = MaskState(indices=np.array([0, 2]), perturbation=np.full(5, 0.5), ratio=0.3)
    out = apply_additive_mask(x, st)
    np.testing.assert_array_equal(out[[0, 2]], x[[0, 2]] + 0.5)
    np.testing.assert_array_equal(out[[1, 3, 4, 5]], x[[1, 3, 4, 5]])
    assert out is not x

    with pytest.raises(DimensionMismatch):
        apply_additive_mask(x, MaskState(indices=np.array([0]),
                                         perturbation=np.zeros(4), ratio=0.1))


# ---------------------------------------------------------------------------
# Encoder / decoders
# ---------------------------------------------------------------------------

def test_encode_single_spot_zero_weights():
    enc = EncoderParams.init(5, 3, 4, 2, SeededRng(5))
    for key in ("enc.W1", "enc.W2", "enc.Wg0", "enc.Wg1"):
        enc.tensors[key][:] = 0.0
    enc.tensors["enc.b2"][:] = np.array([0.4, -0.9, 1.3])
    z = encode(np.zeros((1, 5)), single_spot_graph(), enc, mode="eval")
    assert z.shape == (1, 5)
    elu = np.where(enc.tensors["enc.b2"] > 0, enc.tensors["enc.b2"],
                   np.expm1(enc.tensors["enc.b2"]))
    np.testing.assert_allclose(z[0, :3], elu / np.sqrt(1.0 + BN_EPS), rtol=1e-12)
    np.testing.assert_array_equal(z[0, 3:], 0.0)


def test_encode_identity_graph_reduces_to_dense_relu():
    gen = SeededRng(6)
    enc = EncoderParams.init(7, 4, 5, 3, gen.split("p"))
    x = gen.normal(0.0, 1.0, size=(9, 7))
    z = encode(x, identity_graph(9), enc, mode="eval")
    hm = z[:, :4]
    expect = np.maximum(np.maximum(hm @ enc.tensors["enc.Wg0"], 0.0)
                        @ enc.tensors["enc.Wg1"], 0.0)
    np.testing.assert_allclose(z[:, 4:], expect, atol=1e-12)


def reference_encoder(x, a_norm, t, running, train):
    """Straight-line transcription of the two branches for cross-checking."""
    def bn(v, g, b, rm, rv):
        if train:
            mu, var = v.mean(axis=0), v.var(axis=0)
        else:
            mu, var = rm, rv
        return g * (v - mu) / np.sqrt(var + 1e-5) + b

    def elu(v):
        return np.where(v > 0, v, np.exp(v) - 1.0)

    h = bn(elu(x @ t["enc.W1"] + t["enc.b1"]), t["enc.g1"], t["enc.be1"],
           running["bn1.mean"], running["bn1.var"])
    hm = bn(elu(h @ t["enc.W2"] + t["enc.b2"]), t["enc.g2"], t["enc.be2"],
            running["bn2.mean"], running["bn2.var"])
    hg = np.maximum(a_norm @ hm @ t["enc.Wg0"], 0.0)
    hg = np.maximum(a_norm @ hg @ t["enc.Wg1"], 0.0)
    return np.concatenate([hm, hg], axis=1)


def test_encode_matches_reference_reimplementation():
    coords, x, graph = tiny_instance()
    enc = EncoderParams.init(x.shape[1], 6, 5, 4, SeededRng(31))
    enc.running["bn1.mean"] += 0.1   # distinguish eval from train stats
    enc.running["bn2.var"] *= 1.7
    for mode in ("train", "eval"):
        got = encode(x, graph, enc, mode=mode)
        ref = reference_encoder(x, graph.normalized, enc.tensors, enc.running,
                                train=(mode == "train"))
        np.testing.assert_allclose(got, ref, atol=1e-6)


def test_encode_errors():
    coords, x, graph = tiny_instance()
    enc = EncoderParams.init(x.shape[1], 4, 4, 4, SeededRng(32))
    with pytest.raises(DimensionMismatch):
        encode(x, graph, enc, mode="predict")
    with pytest.raises(DimensionMismatch):
        encode(x[:5], graph, enc)


def test_decode_expression_zero_latent_is_bias():
    coords, x, graph = tiny_instance()
    enc = EncoderParams.init(x.shape[1], 4, 4, 4, SeededRng(33))
    enc.tensors["dec.b"][:] = np.arange(x.shape[1], dtype=np.float64)
    out = decode_expression(np.zeros((x.shape[0], enc.d_z)), graph, enc)
    np.testing.assert_array_equal(out, np.tile(enc.tensors["dec.b"], (x.shape[0], 1)))


def test_decoder_gradient_matches_finite_differences(rng):
    coords, x, graph = tiny_instance(rows=3, cols=4, n_genes=8)
    z = rng.split("z").normal(0.0, 1.0, size=(12, 5))
    w0 = rng.split("w").normal(0.0, 0.3, size=(5, 8))

    def fn(flat):
        t = {"dec.W": flat.reshape(5, 8), "dec.b": np.zeros(8)}
        xhat, r = decoder_forward(z, graph.normalized, t)
        diff = xhat - x
        grads, _ = decoder_backward(2.0 * diff, r, graph.normalized, t)
        return float(np.sum(diff * diff)), grads["dec.W"].ravel()

    report = gradient_check(fn, w0.ravel(), rng=rng.split("probe"))
    assert report.max_rel_error < 1e-4


def test_decode_adjacency_oracles():
    assert np.all(decode_adjacency(np.zeros((4, 3))) == 0.5)
    a = decode_adjacency(np.eye(3))
    np.testing.assert_allclose(np.diag(a), 1.0 / (1.0 + np.exp(-1.0)))
    off = a[~np.eye(3, dtype=bool)]
    np.testing.assert_array_equal(off, 0.5)
    z = SeededRng(34).normal(0.0, 1.0, size=(8, 4))
    ahat = decode_adjacency(z)
    np.testing.assert_array_equal(ahat, ahat.T)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def test_loss_reconstruction_values():
    x = SeededRng(35).normal(0.0, 1.0, size=(3, 4))
    assert loss_reconstruction(x, x) == 0.0
    assert abs(loss_reconstruction(x + 1.0, x) - 1.0) < 1e-12
    xhat = x + SeededRng(36).normal(0.0, 0.5, size=(3, 4))
    oracle = float(((xhat - x) ** 2).sum() / 12.0)
    assert abs(loss_reconstruction(xhat, x) - oracle) < 1e-15
    with pytest.raises(RowMisalignment):
        loss_reconstruction(x, x[:2])


def test_loss_graph_perfect_prediction_standard_latent():
    a = (SeededRng(37).random((6, 6)) > 0.5).astype(np.float64)
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 1.0)
    z = np.array([[1.0], [-1.0], [1.0], [-1.0], [1.0], [-1.0]])
    assert abs(latent_moment_kl(z)) < 1e-15
    assert loss_graph(a, a, z) < 1e-6


def test_loss_graph_formula_oracle():
    gen = SeededRng(38)
    a = (gen.random((5, 5)) > 0.4).astype(np.float64)
    ahat = gen.random((5, 5))
    z = gen.normal(0.5, 2.0, size=(5, 3))
    p = np.clip(ahat, 1e-7, 1 - 1e-7)
    bce = -np.mean(a * np.log(p) + (1 - a) * np.log(1 - p))
    mu = z.mean(axis=0)
    var = z.var(axis=0)
    kl = np.mean(0.5 * (var + mu ** 2 - 1.0 - np.log(var)))
    assert abs(loss_graph(ahat, a, z) - (bce + 0.1 * kl)) < 1e-12
    with pytest.raises(RowMisalignment):
        loss_graph(ahat, a[:4], z)


def test_loss_mask_identities():
    x = SeededRng(39).normal(0.0, 1.0, size=(4, 3))
    idx = np.array([0, 2])
    assert loss_mask(x * 2.0, x, idx) < 1e-30       # cosine ignores scale
    assert loss_mask(x, x, np.array([], dtype=np.int64)) == 0.0

    ortho = np.array([[1.0, 0.0], [0.0, 1.0]])
    flipped = ortho[::-1].copy()
    assert abs(loss_mask(flipped, ortho, np.array([0, 1])) - 1.0) < 1e-15

    zero_row = np.zeros((1, 3))
    assert loss_mask(zero_row, np.ones((1, 3)), np.array([0])) == 1.0


def test_loss_mask_exponent_and_range():
    # cos = 0.5 -> contribution (1 - 0.5)^3
    u = np.array([[1.0, 0.0]])
    v = np.array([[0.5, np.sqrt(3) / 2.0]])
    assert abs(loss_mask(u, v, np.array([0])) - 0.125) < 1e-12
    assert abs(loss_mask(u, v, np.array([0]), alpha=1.0) - 0.5) < 1e-12
    anti = loss_mask(u, -u, np.array([0]))
    assert abs(anti - 8.0) < 1e-12                  # (1 - (-1))^3
    gen = SeededRng(40)
    val = loss_mask(gen.normal(0, 1, (10, 4)), gen.normal(0, 1, (10, 4)),
                    np.arange(10))
    assert 0.0 <= val <= 8.0


# ---------------------------------------------------------------------------
# Alignment term
# ---------------------------------------------------------------------------

def test_mmd_zero_on_identical_sets():
    u = SeededRng(41).normal(0.0, 1.0, size=(50, 6))
    assert abs(fisher_mmd(u, u.copy())) < 1e-8


def test_mmd_point_mass_closed_form():
    d = 3
    x = np.array([0.5, -1.0, 2.0])
    y = x + np.array([0.3, 0.0, -0.4])
    delta2 = float(((x - y) ** 2).sum())
    u = np.stack([x, x])
    v = np.stack([y, y])
    assert abs(fisher_mmd(u, v) - delta2 / (d + 1)) < 1e-12


def test_mmd_symmetry_and_errors():
    gen = SeededRng(42)
    u = gen.normal(0.0, 1.0, size=(7, 4))
    v = gen.normal(0.5, 1.5, size=(9, 4))
    assert abs(fisher_mmd(u, v) - fisher_mmd(v, u)) < 1e-15
    with pytest.raises(SampleTooSmall):
        fisher_mmd(u[:1], v)
    with pytest.raises(DimensionMismatch):
        fisher_mmd(u, gen.normal(0.0, 1.0, size=(9, 5)))


def test_mmd_matches_double_loop_oracle():
    gen = SeededRng(43)
    u = gen.normal(0.0, 1.0, size=(6, 3))
    v = gen.normal(0.2, 1.1, size=(9, 3))

    def k(a, b):
        return (float(a @ b) + 1.0) / 4.0

    m, n = 6, 9
    t1 = sum(k(u[i], u[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    t2 = sum(k(v[i], v[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    cross = sum(k(u[i], v[j]) for i in range(m) for j in range(n)) / (m * n)
    assert abs(fisher_mmd(u, v) - (t1 + t2 - 2.0 * cross)) < 1e-12


def test_mmd_detects_mean_shift():
    gen = SeededRng(44)
    u = gen.normal(0.0, 1.0, size=(40, 3))
    v = gen.normal(2.0, 1.0, size=(40, 3))
    assert fisher_mmd(u, v) > 10.0 * abs(fisher_mmd(u, u + 0.0))


# ---------------------------------------------------------------------------
# Composite objective
# ---------------------------------------------------------------------------

def small_stage1_setup(seed=45):
    coords, x, graph = tiny_instance(rows=3, cols=4, n_genes=10, seed=seed)
    cfg = Stage1Config(d1=6, d2_hidden=5, d2=4, d_noise=3, gan_hidden=5)
    gen = SeededRng(seed + 1)
    enc = EncoderParams.init(10, cfg.d1, cfg.d2_hidden, cfg.d2, gen.split("enc"))
    gan = GanParams.init(10, cfg.d_noise, cfg.gan_hidden, gen.split("gan"))
    tensors = {**enc.tensors, **gan.tensors}
    running = enc.running
    mask_idx = sample_mask(12, 0.5, gen.split("mask"))
    noise = gen.split("noise").normal(0.0, 1.0, size=(12, cfg.d_noise))
    return x, graph, cfg, tensors, running, mask_idx, noise


def test_stage1_gradients_match_finite_differences(rng):
    x, graph, cfg, tensors, running, mask_idx, noise = small_stage1_setup()

    def eval_fn(t):
        comps, grads = stage1_loss_and_grads(t, running, x, graph.adjacency,
                                             graph.normalized, mask_idx, noise, cfg)
        return comps["total"], grads

    fn, x0, names = make_flat_objective(tensors, sorted(tensors), eval_fn)
    report = gradient_check(fn, x0, rng=rng.split("probe"), names=names)
    assert report.passed(), report.per_parameter_errors


def test_stage1_components_consistent():
    x, graph, cfg, tensors, running, mask_idx, noise = small_stage1_setup(seed=46)
    comps, grads = stage1_loss_and_grads(tensors, running, x, graph.adjacency,
                                         graph.normalized, mask_idx, noise, cfg)
    expect = (cfg.lambda_rec * comps["rec"] + cfg.lambda_graph * comps["graph"]
              + cfg.lambda_mask * comps["mask"] + cfg.lambda_gan * comps["gan"])
    assert abs(comps["total"] - expect) < 1e-12
    assert set(grads) == set(tensors)
    # discriminator params do not enter the generator-side objective
    for key in grads:
        if key.startswith("disc."):
            assert np.all(grads[key] == 0.0)


def test_discriminator_loss_oracle_and_gradients(rng):
    gen = SeededRng(47)
    gan = GanParams.init(6, 3, 4, gen.split("g"))
    x_real = gen.normal(0.0, 1.0, size=(8, 6))
    x_fake = gen.normal(0.5, 1.0, size=(8, 6))

    loss, grads = discriminator_loss_and_grads(gan.tensors, x_real, x_fake)
    lr, _ = discriminator_forward(x_real, gan.tensors)
    lf, _ = discriminator_forward(x_fake, gan.tensors)
    sig = lambda t: 1.0 / (1.0 + np.exp(-t))
    oracle = float(-np.mean(np.log(sig(lr))) - np.mean(np.log(1.0 - sig(lf))))
    assert abs(loss - oracle) < 1e-10
    assert set(grads) == {"disc.W1", "disc.b1", "disc.w2", "disc.b2"}

    def eval_fn(t):
        full = {**gan.tensors, **t}
        l, g = discriminator_loss_and_grads(full, x_real, x_fake)
        return l, g

    keys = sorted(grads)
    fn, x0, names = make_flat_objective(gan.tensors, keys, eval_fn)
    report = gradient_check(fn, x0, rng=rng.split("dprobe"), names=names)
    assert report.passed()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_train_stage1_plain_autoencoder_reduces_reconstruction():
    coords, x, graph = tiny_instance(rows=4, cols=5, n_genes=12, seed=48)
    cfg = Stage1Config(epochs=60, d1=6, d2_hidden=5, d2=4, d_noise=3,
                       gan_hidden=5, lambda_graph=0.0, lambda_mask=0.0,
                       lambda_gan=0.0)
    result = train_stage1(x, graph, cfg, SeededRng(49))
    recs = [row[1] for row in result.trace.rows]
    assert result.trace.columns[0] == "rec"
    assert recs[-1] < recs[0]
    assert result.z.shape == (20, cfg.d1 + cfg.d2)


def test_train_stage1_deterministic():
    coords, x, graph = tiny_instance(rows=3, cols=4, n_genes=8, seed=50)
    cfg = Stage1Config(epochs=5, d1=4, d2_hidden=4, d2=3, d_noise=2, gan_hidden=4)
    r1 = train_stage1(x, graph, cfg, SeededRng(51))
    r2 = train_stage1(x, graph, cfg, SeededRng(51))
    assert r1.trace.rows == r2.trace.rows
    assert r1.z.tobytes() == r2.z.tobytes()


def test_train_stage1_total_settles():
    coords, x, graph = tiny_instance(rows=5, cols=6, n_genes=15, seed=52)
    cfg = Stage1Config(epochs=120, d1=8, d2_hidden=6, d2=4, d_noise=4,
                       gan_hidden=6)
    result = train_stage1(x, graph, cfg, SeededRng(53))
    totals = result.trace.totals()
    for prev, cur in zip(totals[-50:], totals[-49:]):
        assert cur <= prev * 1.05
