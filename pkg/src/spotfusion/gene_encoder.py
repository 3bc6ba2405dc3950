"""Stage I: masked graph autoencoder over expression with adversarial latent
alignment.

Architecture (all dense numpy, full batch):

* additive masking: a learnable perturbation vector is added to a random
  subset of spot rows each epoch;
* dual-branch encoder: a two-layer MLP (affine -> ELU -> batch norm) feeding a
  two-layer graph convolution (ReLU) over the normalized adjacency; the latent
  is the concatenation of both branch outputs;
* decoders: one graph-convolution layer back to expression space, and an
  inner-product sigmoid decoder for adjacency;
* losses: mean squared reconstruction, adjacency BCE plus a latent
  moment-matching KL, a masked cosine-consistency penalty, and an MMD between
  real and generated latents under the parameter-gradient (Fisher) kernel of
  the generator's output layer, which evaluates to the normalized affine
  kernel k(a, b) = (<a, b> + 1) / (d + 1).

Gradients are hand-derived; `stage1_loss_and_grads` returns both and is the
objective the finite-difference checker probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, DivergedLoss, NonFinite,
                     RowMisalignment, SampleTooSmall)
from .optim import Adam
from .rng import SeededRng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class EncoderParams:
    d_in: int
    d1: int
    d2_hidden: int
    d2: int
    tensors: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)

    @property
    def d_z(self) -> int:
        return self.d1 + self.d2

    @classmethod
    def init(cls, d_in: int, d1: int, d2_hidden: int, d2: int, rng: SeededRng):
        def w(shape, fan_in, stream):
            return rng.split(stream).normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        d_z = d1 + d2
        tensors = {
            "mask.m": np.zeros(d_in),
            "enc.W1": w((d_in, d1), d_in, "W1"), "enc.b1": np.zeros(d1),
            "enc.g1": np.ones(d1), "enc.be1": np.zeros(d1),
            "enc.W2": w((d1, d1), d1, "W2"), "enc.b2": np.zeros(d1),
            "enc.g2": np.ones(d1), "enc.be2": np.zeros(d1),
            "enc.Wg0": w((d1, d2_hidden), d1, "Wg0"),
            "enc.Wg1": w((d2_hidden, d2), d2_hidden, "Wg1"),
            "dec.W": w((d_z, d_in), d_z, "Wdec"), "dec.b": np.zeros(d_in),
        }
        running = {
            "bn1.mean": np.zeros(d1), "bn1.var": np.ones(d1),
            "bn2.mean": np.zeros(d1), "bn2.var": np.ones(d1),
        }
        return cls(d_in=d_in, d1=d1, d2_hidden=d2_hidden, d2=d2,
                   tensors=tensors, running=running)


@dataclass
class GanParams:
    d_in: int        # expression width the generator emits
    d_noise: int
    d_hidden: int
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d_in: int, d_noise: int, d_hidden: int, rng: SeededRng):
        def w(shape, fan_in, stream):
            return rng.split(stream).normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        tensors = {
            "gen.W1": w((d_noise, d_hidden), d_noise, "genW1"), "gen.b1": np.zeros(d_hidden),
            "gen.W2": w((d_hidden, d_in), d_hidden, "genW2"), "gen.b2": np.zeros(d_in),
            "disc.W1": w((d_in, d_hidden), d_in, "discW1"), "disc.b1": np.zeros(d_hidden),
            "disc.w2": w((d_hidden, 1), d_hidden, "discW2"), "disc.b2": np.zeros(1),
        }
        return cls(d_in=d_in, d_noise=d_noise, d_hidden=d_hidden, tensors=tensors)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

@dataclass
class MaskState:
    indices: np.ndarray     # masked row indices
    perturbation: np.ndarray
    ratio: float


def sample_mask(n_spots: int, ratio: float, rng: SeededRng) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise DimensionMismatch(f"mask ratio must lie in [0, 1], got {ratio}")
    n_mask = int(round(ratio * n_spots))
    return np.sort(rng.permutation(n_spots)[:n_mask])


def apply_additive_mask(x: np.ndarray, state: MaskState) -> np.ndarray:
    """X'[i] = X[i] + m for masked rows i; other rows pass through."""
    if state.perturbation.shape[0] != x.shape[1]:
        raise DimensionMismatch("perturbation width does not match expression width")
    out = np.array(x, dtype=np.float64, copy=True)
    out[state.indices] += state.perturbation
    return out


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------

def _elu(x):
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(x))


def _bn_forward(x, gamma, beta, running_mean, running_var, *, train, update_running):
    if train:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if update_running:
            running_mean *= 1.0 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mu
            running_var *= 1.0 - BN_MOMENTUM
            running_var += BN_MOMENTUM * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xh = (x - mu) * inv
    return gamma * xh + beta, (xh, inv)


def _bn_backward(dout, cache, gamma):
    xh, inv = cache
    n = dout.shape[0]
    dgamma = np.sum(dout * xh, axis=0)
    dbeta = np.sum(dout, axis=0)
    dxh = dout * gamma
    dx = (inv / n) * (n * dxh - dxh.sum(axis=0) - xh * np.sum(dxh * xh, axis=0))
    return dx, dgamma, dbeta


def encoder_forward(x, a_norm, t: dict, running: dict, *, train: bool,
                    update_running: bool = False):
    """Dual-branch forward pass; returns (Z, cache)."""
    a1 = x @ t["enc.W1"] + t["enc.b1"]
    e1 = _elu(a1)
    h1, bn1 = _bn_forward(e1, t["enc.g1"], t["enc.be1"],
                          running["bn1.mean"], running["bn1.var"],
                          train=train, update_running=update_running)
    a2 = h1 @ t["enc.W2"] + t["enc.b2"]
    e2 = _elu(a2)
    hm, bn2 = _bn_forward(e2, t["enc.g2"], t["enc.be2"],
                          running["bn2.mean"], running["bn2.var"],
                          train=train, update_running=update_running)
    p1 = a_norm @ hm
    b1 = p1 @ t["enc.Wg0"]
    g1 = np.maximum(b1, 0.0)
    p2 = a_norm @ g1
    b2 = p2 @ t["enc.Wg1"]
    hg = np.maximum(b2, 0.0)
    z = np.concatenate([hm, hg], axis=1)
    cache = dict(x=x, a1=a1, bn1=bn1, h1=h1, a2=a2, bn2=bn2, hm=hm,
                 p1=p1, b1=b1, g1=g1, p2=p2, b2=b2, a_norm=a_norm, train=train)
    return z, cache


def encoder_backward(dz, cache, t: dict):
    """Backprop dL/dZ through the dual-branch encoder (train-mode batch norm).

    :returns: (parameter grads, dL/dX)
    """
    assert cache["train"], "backward expects a train-mode forward cache"
    a_norm = cache["a_norm"]
    d1 = cache["hm"].shape[1]
    dhm = dz[:, :d1].copy()
    dhg = dz[:, d1:]
    # GCN branch
    db2 = dhg * (cache["b2"] > 0)
    dWg1 = cache["p2"].T @ db2
    dp2 = db2 @ t["enc.Wg1"].T
    dg1 = a_norm @ dp2
    db1 = dg1 * (cache["b1"] > 0)
    dWg0 = cache["p1"].T @ db1
    dp1 = db1 @ t["enc.Wg0"].T
    dhm += a_norm @ dp1
    # MLP layer 2 (affine -> ELU -> BN)
    de2, dg2, dbe2 = _bn_backward(dhm, cache["bn2"], t["enc.g2"])
    da2 = de2 * _elu_grad(cache["a2"])
    dW2 = cache["h1"].T @ da2
    db2_lin = da2.sum(axis=0)
    dh1 = da2 @ t["enc.W2"].T
    # MLP layer 1
    de1, dg1_bn, dbe1 = _bn_backward(dh1, cache["bn1"], t["enc.g1"])
    da1 = de1 * _elu_grad(cache["a1"])
    dW1 = cache["x"].T @ da1
    db1_lin = da1.sum(axis=0)
    dx = da1 @ t["enc.W1"].T
    grads = {
        "enc.W1": dW1, "enc.b1": db1_lin, "enc.g1": dg1_bn, "enc.be1": dbe1,
        "enc.W2": dW2, "enc.b2": db2_lin, "enc.g2": dg2, "enc.be2": dbe2,
        "enc.Wg0": dWg0, "enc.Wg1": dWg1,
    }
    return grads, dx


def decoder_forward(z, a_norm, t: dict):
    r = a_norm @ z
    return r @ t["dec.W"] + t["dec.b"], r


def decoder_backward(dxhat, r, a_norm, t: dict):
    dW = r.T @ dxhat
    db = dxhat.sum(axis=0)
    dz = a_norm @ (dxhat @ t["dec.W"].T)
    return {"dec.W": dW, "dec.b": db}, dz


def generator_forward(noise, t: dict):
    aq = noise @ t["gen.W1"] + t["gen.b1"]
    hq = _elu(aq)
    xg = hq @ t["gen.W2"] + t["gen.b2"]
    return xg, (noise, aq, hq)


def generator_backward(dxg, cache, t: dict):
    noise, aq, hq = cache
    dW2 = hq.T @ dxg
    db2 = dxg.sum(axis=0)
    dhq = dxg @ t["gen.W2"].T
    daq = dhq * _elu_grad(aq)
    return {
        "gen.W1": noise.T @ daq, "gen.b1": daq.sum(axis=0),
        "gen.W2": dW2, "gen.b2": db2,
    }


def discriminator_forward(x, t: dict):
    ad = x @ t["disc.W1"] + t["disc.b1"]
    hd = _elu(ad)
    logit = hd @ t["disc.w2"] + t["disc.b2"]
    return logit[:, 0], (ad, hd)


def discriminator_backward(dlogit, cache, x, t: dict):
    ad, hd = cache
    dlogit = dlogit[:, None]
    dw2 = hd.T @ dlogit
    db2 = dlogit.sum(axis=0)
    dhd = dlogit @ t["disc.w2"].T
    dad = dhd * _elu_grad(ad)
    return {
        "disc.W1": x.T @ dad, "disc.b1": dad.sum(axis=0),
        "disc.w2": dw2, "disc.b2": db2,
    }


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def encode(x, graph, enc: EncoderParams, mode: str = "eval") -> np.ndarray:
    """Latent embedding Z = [MLP branch || GCN branch].

    ``mode`` selects batch-norm statistics: "train" uses batch moments,
    "eval" uses the running averages accumulated during training.
    """
    if mode not in ("train", "eval"):
        raise DimensionMismatch(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if graph.normalized.shape[0] != x.shape[0]:
        raise DimensionMismatch(
            f"graph has {graph.normalized.shape[0]} spots, expression has {x.shape[0]}")
    z, _ = encoder_forward(x, graph.normalized, enc.tensors, enc.running,
                           train=(mode == "train"))
    return z


def decode_expression(z, graph, enc: EncoderParams) -> np.ndarray:
    xhat, _ = decoder_forward(z, graph.normalized, enc.tensors)
    return xhat


def decode_adjacency(z) -> np.ndarray:
    """Edge probabilities sigmoid(z_i . z_j)."""
    return _sigmoid(z @ z.T)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def loss_reconstruction(xhat, x) -> float:
    """Squared Frobenius error, mean-reduced over all entries."""
    if xhat.shape != x.shape:
        raise RowMisalignment(f"shape mismatch {xhat.shape} vs {x.shape}")
    diff = xhat - x
    return float(np.sum(diff * diff) / diff.size)


def latent_moment_kl(z) -> float:
    """KL( N(mean(Z), diag var(Z)) || N(0, I) ), averaged over latent dims."""
    mu = z.mean(axis=0)
    var = np.maximum(z.var(axis=0), 1e-12)
    return float(np.mean(var + mu * mu - 1.0 - np.log(var)) / 2.0)


def _latent_moment_kl_grad(z):
    n, d = z.shape
    mu = z.mean(axis=0)
    var = np.maximum(z.var(axis=0), 1e-12)
    return (mu + (1.0 - 1.0 / var) * (z - mu)) / (n * d)


def loss_graph(a_hat, a, z, lambda_kl: float = 0.1) -> float:
    """Mean adjacency BCE plus a weighted latent moment-matching KL."""
    if a_hat.shape != a.shape:
        raise RowMisalignment(f"shape mismatch {a_hat.shape} vs {a.shape}")
    p = np.clip(a_hat, 1e-7, 1.0 - 1e-7)
    bce = -np.mean(a * np.log(p) + (1.0 - a) * np.log1p(-p))
    return float(bce + lambda_kl * latent_moment_kl(z))


def loss_mask(xhat, x, mask_indices, alpha: float = 3.0) -> float:
    """Cosine-consistency penalty on masked rows.

    Rows are L2-normalized before the inner product; a zero row on either
    side contributes the maximum penalty 1.  Empty masks give 0.
    """
    mask_indices = np.asarray(mask_indices, dtype=np.int64)
    if mask_indices.size == 0:
        return 0.0
    u = xhat[mask_indices]
    v = x[mask_indices]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    cos = np.zeros(len(mask_indices))
    cos[ok] = np.sum(u[ok] * v[ok], axis=1) / (nu[ok] * nv[ok])
    return float(np.mean((1.0 - cos) ** alpha))


def _loss_mask_grad(xhat, x, mask_indices, alpha):
    """Gradient of loss_mask w.r.t. xhat (same shape, zero off-mask)."""
    g = np.zeros_like(xhat)
    if len(mask_indices) == 0:
        return 0.0, g
    u = xhat[mask_indices]
    v = x[mask_indices]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    cos = np.zeros(len(mask_indices))
    cos[ok] = np.sum(u[ok] * v[ok], axis=1) / (nu[ok] * nv[ok])
    loss = float(np.mean((1.0 - cos) ** alpha))
    coeff = np.zeros(len(mask_indices))
    coeff[ok] = -alpha * (1.0 - cos[ok]) ** (alpha - 1.0) / len(mask_indices)
    du = np.zeros_like(u)
    du[ok] = coeff[ok, None] * (v[ok] / (nu[ok] * nv[ok])[:, None]
                                - cos[ok, None] * u[ok] / (nu[ok] ** 2)[:, None])
    g[mask_indices] = du
    return loss, g


def fisher_mmd(u, v, gan: GanParams | None = None) -> float:
    """Unbiased MMD^2 between sample sets under the Fisher kernel.

    The feature map is the gradient of the generator output layer's summed
    output with respect to that layer's parameters, with the sample injected
    at the layer input; it evaluates to phi(x) = [x (x output-replicated),
    ones], so the normalized kernel is k(a, b) = (<a, b> + 1) / (d + 1)
    regardless of the layer's current weights (``gan`` is accepted for
    interface completeness).

    Estimator: off-diagonal means of the within-set kernels; for equal sample
    sizes the cross term also excludes matched index pairs, which makes the
    estimate exactly zero on duplicated sets.
    """
    val, _, _ = _mmd_and_grads(np.asarray(u, dtype=np.float64),
                               np.asarray(v, dtype=np.float64))
    return val


def _mmd_and_grads(u, v):
    m, n = u.shape[0], v.shape[0]
    if m < 2 or n < 2:
        raise SampleTooSmall(f"need at least 2 samples per set, got {m} and {n}")
    if u.shape[1] != v.shape[1]:
        raise DimensionMismatch(f"sample widths differ: {u.shape[1]} vs {v.shape[1]}")
    d = u.shape[1]
    den = float(d + 1)
    kuu = (u @ u.T + 1.0) / den
    kvv = (v @ v.T + 1.0) / den
    kuv = (u @ v.T + 1.0) / den
    t1 = (kuu.sum() - np.trace(kuu)) / (m * (m - 1))
    t2 = (kvv.sum() - np.trace(kvv)) / (n * (n - 1))
    su = u.sum(axis=0)
    sv = v.sum(axis=0)
    du = 2.0 * (su - u) / den / (m * (m - 1))
    dv = 2.0 * (sv - v) / den / (n * (n - 1))
    if m == n:
        cross = (kuv.sum() - np.trace(kuv)) / (m * (m - 1))
        du -= 2.0 * (sv - v) / den / (m * (m - 1))
        dv -= 2.0 * (su - u) / den / (m * (m - 1))
    else:
        cross = kuv.mean()
        du -= 2.0 * sv / den / (m * n)
        dv -= 2.0 * su / den / (m * n)
    val = float(t1 + t2 - 2.0 * cross)
    return val, du, dv


# ---------------------------------------------------------------------------
# Stage objective
# ---------------------------------------------------------------------------

@dataclass
class Stage1Config:
    epochs: int = 400
    lr: float = 1e-3
    d1: int = 64
    d2_hidden: int = 48
    d2: int = 32
    d_noise: int = 32
    gan_hidden: int = 64
    mask_ratio: float = 0.8
    mask_alpha: float = 3.0
    lambda_rec: float = 1.0
    lambda_graph: float = 0.3
    lambda_mask: float = 1.0
    lambda_gan: float = 0.1
    lambda_kl: float = 0.1


def stage1_loss_and_grads(tensors: dict, running: dict, x, adjacency, a_norm,
                          mask_indices, noise, cfg: Stage1Config, *,
                          update_running: bool = False):
    """Composite stage-I objective with analytic gradients.

    :returns: (components dict with rec/graph/mask/gan/total, grads dict)
    """
    n, g = x.shape
    xp = np.array(x, copy=True)
    xp[mask_indices] += tensors["mask.m"]
    z, cache = encoder_forward(xp, a_norm, tensors, running, train=True,
                               update_running=update_running)
    xhat, r = decoder_forward(z, a_norm, tensors)
    s = z @ z.T

    xg, gen_cache = generator_forward(noise, tensors)
    zg, cache_g = encoder_forward(xg, a_norm, tensors, running, train=True)

    # losses
    diff = xhat - x
    l_rec = float(np.sum(diff * diff) / diff.size)
    bce = float(np.mean(_softplus(s) - s * adjacency))
    l_kl = latent_moment_kl(z)
    l_graph = bce + cfg.lambda_kl * l_kl
    l_mask, dxhat_mask = _loss_mask_grad(xhat, x, mask_indices, cfg.mask_alpha)
    l_mmd, dz_mmd, dzg_mmd = _mmd_and_grads(z, zg)
    total = (cfg.lambda_rec * l_rec + cfg.lambda_graph * l_graph
             + cfg.lambda_mask * l_mask + cfg.lambda_gan * l_mmd)

    # backward
    dxhat = cfg.lambda_rec * 2.0 * diff / diff.size + cfg.lambda_mask * dxhat_mask
    dec_grads, dz = decoder_backward(dxhat, r, a_norm, tensors)
    ds = cfg.lambda_graph * (_sigmoid(s) - adjacency) / s.size
    dz += (ds + ds.T) @ z
    dz += cfg.lambda_graph * cfg.lambda_kl * _latent_moment_kl_grad(z)
    dz += cfg.lambda_gan * dz_mmd
    enc_grads, dxp = encoder_backward(dz, cache, tensors)
    enc_grads_g, dxg = encoder_backward(cfg.lambda_gan * dzg_mmd, cache_g, tensors)
    gen_grads = generator_backward(dxg, gen_cache, tensors)

    grads = {k: np.zeros_like(v) for k, v in tensors.items()}
    for src in (dec_grads, enc_grads, enc_grads_g, gen_grads):
        for k, v in src.items():
            grads[k] += v
    grads["mask.m"] += dxp[mask_indices].sum(axis=0)

    components = {"rec": l_rec, "graph": l_graph, "mask": l_mask,
                  "gan": l_mmd, "total": float(total)}
    return components, grads


def discriminator_loss_and_grads(tensors: dict, x_real, x_fake):
    """Standard minimax BCE for the discriminator (real -> 1, generated -> 0)."""
    logit_r, cache_r = discriminator_forward(x_real, tensors)
    logit_f, cache_f = discriminator_forward(x_fake, tensors)
    loss = float(np.mean(_softplus(logit_r) - logit_r)
                 + np.mean(_softplus(logit_f)))
    dlr = (_sigmoid(logit_r) - 1.0) / logit_r.size
    dlf = _sigmoid(logit_f) / logit_f.size
    grads_r = discriminator_backward(dlr, cache_r, x_real, tensors)
    grads_f = discriminator_backward(dlf, cache_f, x_fake, tensors)
    return loss, {k: grads_r[k] + grads_f[k] for k in grads_r}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class LossTrace:
    """Per-epoch loss components; writes the losses.csv layout."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def append(self, epoch: int, components: dict):
        self.rows.append((epoch,) + tuple(float(components[c]) for c in self.columns))

    def totals(self):
        return [row[-1] for row in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(["epoch"] + self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join([str(row[0])] + [repr(v) for v in row[1:]]) + "\n")


@dataclass
class Stage1Result:
    encoder: EncoderParams
    gan: GanParams
    z: np.ndarray
    trace: LossTrace


def train_stage1(x, graph, cfg: Stage1Config, rng: SeededRng) -> Stage1Result:
    """Full-batch Adam training of the masked graph autoencoder.

    Each epoch resamples the mask and generator noise, takes one discriminator
    step (minimax BCE), then one generator+encoder step on the composite
    objective.  Raises DivergedLoss on a non-finite total.
    """
    x = np.asarray(x, dtype=np.float64)
    n, g = x.shape
    enc = EncoderParams.init(g, cfg.d1, cfg.d2_hidden, cfg.d2, rng.split("enc-init"))
    gan = GanParams.init(g, cfg.d_noise, cfg.gan_hidden, rng.split("gan-init"))
    tensors = {**enc.tensors, **gan.tensors}
    main_keys = [k for k in tensors if not k.startswith("disc.")]
    disc_keys = [k for k in tensors if k.startswith("disc.")]
    opt_main = Adam({k: tensors[k] for k in main_keys}, lr=cfg.lr)
    opt_disc = Adam({k: tensors[k] for k in disc_keys}, lr=cfg.lr)
    stream = rng.split("stage1")
    trace = LossTrace(["rec", "graph", "mask", "gan", "total"])
    for epoch in range(cfg.epochs):
        mask_idx = sample_mask(n, cfg.mask_ratio, stream)
        noise = stream.normal(0.0, 1.0, size=(n, cfg.d_noise))
        x_fake, _ = generator_forward(noise, tensors)
        _, disc_grads = discriminator_loss_and_grads(tensors, x, x_fake)
        opt_disc.step(disc_grads)
        components, grads = stage1_loss_and_grads(
            tensors, enc.running, x, graph.adjacency, graph.normalized,
            mask_idx, noise, cfg, update_running=True)
        if not np.isfinite(components["total"]):
            raise DivergedLoss(f"stage 1 loss became non-finite at epoch {epoch}")
        opt_main.step({k: grads[k] for k in main_keys})
        trace.append(epoch, components)
    z = encode(x, graph, enc, mode="eval")
    if not np.all(np.isfinite(z)):
        raise NonFinite("stage 1 produced a non-finite embedding")
    return Stage1Result(encoder=enc, gan=gan, z=z, trace=trace)
