"""Stage II embedded clustering and the final refinement pipeline.

Stage II continues training the stage-I encoder under a deep-embedded
clustering objective: Student-t soft assignments against a periodically
refreshed sharpened target, plus the stage-I reconstruction and graph terms
and a generative consistency term (soft-assignment KL against the nearest
real latent, plus the latent MMD).

Refinement runs after fusion: EM-GMM hard labels, high-agreement anchor
selection per cluster under the spatial Gaussian kernel, and anchored label
diffusion Y <- row-normalize(W Y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ClusterCollapse, DimensionMismatch, DivergedLoss,
                     EmptyGenerated, NonFinite)
from .gene_encoder import (EncoderParams, GanParams, LossTrace, _latent_moment_kl_grad,
                           _mmd_and_grads, _sigmoid, _softplus, decoder_backward,
                           decoder_forward, encode, encoder_backward, encoder_forward,
                           fisher_mmd, generator_backward, generator_forward,
                           latent_moment_kl)
from .numerics import kmeans_fit, gmm_em_fit, gmm_posteriors, one_hot, pairwise_sq_dists
from .optim import Adam
from .rng import SeededRng


# ---------------------------------------------------------------------------
# Soft assignment
# ---------------------------------------------------------------------------

def _student_t(z, centroids, alpha):
    d2 = pairwise_sq_dists(z, centroids)
    t = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    s = t.sum(axis=1, keepdims=True)
    return t / s, t, s[:, 0], d2


def soft_assign(z, centroids, alpha: float = 1.0) -> np.ndarray:
    """Student-t soft cluster assignment; rows sum to 1."""
    if z.shape[1] != centroids.shape[1]:
        raise DimensionMismatch(
            f"latent width {z.shape[1]} does not match centroid width {centroids.shape[1]}")
    q, _, _, _ = _student_t(np.asarray(z, dtype=np.float64),
                            np.asarray(centroids, dtype=np.float64), alpha)
    return q


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened target P: squared assignments normalized by cluster frequency."""
    f = q.sum(axis=0)
    w = (q * q) / f
    return w / w.sum(axis=1, keepdims=True)


def loss_dec(p: np.ndarray, q: np.ndarray) -> float:
    """KL(P || Q) summed over all entries, with 0 log 0 = 0."""
    if p.shape != q.shape:
        raise DimensionMismatch(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _soft_assign_backward(z, centroids, alpha, t, s, d2, dq):
    """Chain dL/dQ through the Student-t assignment to (dZ, dCentroids)."""
    q = t / s[:, None]
    a_dot_q = np.sum(dq * q, axis=1, keepdims=True)
    dt = (dq - a_dot_q) / s[:, None]
    beta = (alpha + 1.0) / 2.0
    dd2 = dt * (-(beta / alpha)) * t / (1.0 + d2 / alpha)
    row = dd2.sum(axis=1, keepdims=True)
    col = dd2.sum(axis=0)[:, None]
    dz = 2.0 * (row * z - dd2 @ centroids)
    dmu = 2.0 * (col * centroids - dd2.T @ z)
    return dz, dmu


def _dec_loss_and_grads(z, centroids, p, alpha):
    q, t, s, d2 = _student_t(z, centroids, alpha)
    mask = p > 0
    loss = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    beta = (alpha + 1.0) / 2.0
    g = (beta / alpha) * (p - q) / (1.0 + d2 / alpha)
    row = g.sum(axis=1, keepdims=True)
    col = g.sum(axis=0)[:, None]
    dz = 2.0 * (row * z - g @ centroids)
    dmu = 2.0 * (col * centroids - g.T @ z)
    return loss, dz, dmu, q


def consistency_loss(z, z_gen, q, q_gen) -> float:
    """Generated-vs-real agreement: KL of generated soft assignments against
    the row of their nearest real latent, plus the latent-set MMD."""
    z = np.asarray(z, dtype=np.float64)
    z_gen = np.asarray(z_gen, dtype=np.float64)
    if z_gen.shape[0] == 0:
        raise EmptyGenerated("no generated samples")
    match = np.argmin(pairwise_sq_dists(z_gen, z), axis=1)
    kl = float(np.sum(q_gen * (np.log(q_gen) - np.log(q[match]))))
    return kl + fisher_mmd(z, z_gen)


def _consistency_loss_and_grads(z, zg, centroids, alpha):
    q, t, s, d2 = _student_t(z, centroids, alpha)
    qg, tg, sg, d2g = _student_t(zg, centroids, alpha)
    match = np.argmin(pairwise_sq_dists(zg, z), axis=1)
    log_ratio = np.log(qg) - np.log(q[match])
    kl = float(np.sum(qg * log_ratio))
    # gradient through the generated assignments
    dqg = log_ratio + 1.0
    dzg, dmu_g = _soft_assign_backward(zg, centroids, alpha, tg, sg, d2g, dqg)
    # gradient through the matched real rows
    dq_rows = np.zeros_like(q)
    np.add.at(dq_rows, match, -qg / q[match])
    dz, dmu_r = _soft_assign_backward(z, centroids, alpha, t, s, d2, dq_rows)
    mmd, dz_mmd, dzg_mmd = _mmd_and_grads(z, zg)
    return (kl + mmd, dz + dz_mmd, dzg + dzg_mmd, dmu_g + dmu_r)


# ---------------------------------------------------------------------------
# Stage II training
# ---------------------------------------------------------------------------

@dataclass
class Stage2Config:
    epochs: int = 200
    lr: float = 1e-3
    refresh_interval: int = 20
    stop_fraction: float = 0.001
    alpha: float = 1.0
    lambda_rec: float = 1.0
    lambda_graph: float = 0.3
    lambda_dec: float = 1.0
    lambda_gan: float = 0.1
    lambda_kl: float = 0.1
    collapse_threshold: float = 1e-3
    collapse_patience: int = 3


@dataclass
class AssignmentState:
    centroids: np.ndarray
    q: np.ndarray
    p: np.ndarray
    hard: np.ndarray
    alpha: float


def stage2_loss_and_grads(tensors: dict, running: dict, x, adjacency, a_norm,
                          p_target, noise, cfg: Stage2Config, *,
                          update_running: bool = False):
    """Stage-II objective (reconstruction + graph + DEC + consistency) with
    analytic gradients over encoder, decoders, generator and centroids."""
    z, cache = encoder_forward(x, a_norm, tensors, running, train=True,
                               update_running=update_running)
    xhat, r = decoder_forward(z, a_norm, tensors)
    s_logits = z @ z.T
    xg, gen_cache = generator_forward(noise, tensors)
    zg, cache_g = encoder_forward(xg, a_norm, tensors, running, train=True)
    centroids = tensors["centroids"]

    diff = xhat - x
    l_rec = float(np.sum(diff * diff) / diff.size)
    bce = float(np.mean(_softplus(s_logits) - s_logits * adjacency))
    l_kl = latent_moment_kl(z)
    l_graph = bce + cfg.lambda_kl * l_kl
    l_dec, dz_dec, dmu_dec, q = _dec_loss_and_grads(z, centroids, p_target, cfg.alpha)
    l_cons, dz_cons, dzg_cons, dmu_cons = _consistency_loss_and_grads(
        z, zg, centroids, cfg.alpha)
    total = (cfg.lambda_rec * l_rec + cfg.lambda_graph * l_graph
             + cfg.lambda_dec * l_dec + cfg.lambda_gan * l_cons)

    dxhat = cfg.lambda_rec * 2.0 * diff / diff.size
    dec_grads, dz = decoder_backward(dxhat, r, a_norm, tensors)
    ds = cfg.lambda_graph * (_sigmoid(s_logits) - adjacency) / s_logits.size
    dz += (ds + ds.T) @ z
    dz += cfg.lambda_graph * cfg.lambda_kl * _latent_moment_kl_grad(z)
    dz += cfg.lambda_dec * dz_dec + cfg.lambda_gan * dz_cons
    enc_grads, _ = encoder_backward(dz, cache, tensors)
    enc_grads_g, dxg = encoder_backward(cfg.lambda_gan * dzg_cons, cache_g, tensors)
    gen_grads = generator_backward(dxg, gen_cache, tensors)

    grads = {k: np.zeros_like(v) for k, v in tensors.items()}
    for src in (dec_grads, enc_grads, enc_grads_g, gen_grads):
        for k, v in src.items():
            grads[k] += v
    grads["centroids"] += cfg.lambda_dec * dmu_dec + cfg.lambda_gan * dmu_cons

    components = {"rec": l_rec, "graph": l_graph, "dec": l_dec,
                  "cons": l_cons, "total": float(total)}
    return components, grads, q


@dataclass
class Stage2Result:
    encoder: EncoderParams
    gan: GanParams
    assignment: AssignmentState
    z: np.ndarray
    trace: LossTrace


def train_stage2(x, graph, n_clusters: int, enc: EncoderParams, gan: GanParams,
                 cfg: Stage2Config, rng: SeededRng) -> Stage2Result:
    """DEC refinement of the stage-I encoder.

    Targets refresh every ``refresh_interval`` epochs; training stops early
    when fewer than ``stop_fraction`` of hard assignments change at a refresh.
    A cluster whose soft mass stays below collapse_threshold * n/K for
    ``collapse_patience`` consecutive refreshes raises ClusterCollapse.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    z0 = encode(x, graph, enc, mode="eval")
    mu0, _ = kmeans_fit(z0, n_clusters, rng.split("centroid-init"))
    tensors = {**enc.tensors, **gan.tensors, "centroids": mu0.copy()}
    main_keys = [k for k in tensors if not k.startswith("disc.")]
    opt = Adam({k: tensors[k] for k in main_keys}, lr=cfg.lr)
    stream = rng.split("stage2")
    trace = LossTrace(["rec", "graph", "dec", "cons", "total"])
    p_target = None
    last_hard = None
    collapse_streak = np.zeros(n_clusters, dtype=np.int64)
    for epoch in range(cfg.epochs):
        if epoch % cfg.refresh_interval == 0:
            z_now, _ = encoder_forward(x, graph.normalized, tensors, enc.running,
                                       train=True)
            q_now = soft_assign(z_now, tensors["centroids"], cfg.alpha)
            mass = q_now.sum(axis=0)
            collapse_streak = np.where(mass < cfg.collapse_threshold * n / n_clusters,
                                       collapse_streak + 1, 0)
            if np.any(collapse_streak >= cfg.collapse_patience):
                dead = int(np.argmax(collapse_streak))
                raise ClusterCollapse(
                    f"cluster {dead} soft mass below threshold for "
                    f"{cfg.collapse_patience} consecutive refreshes")
            hard = np.argmax(q_now, axis=1)
            if last_hard is not None:
                changed = float(np.mean(hard != last_hard))
                if changed < cfg.stop_fraction:
                    last_hard = hard
                    break
            last_hard = hard
            p_target = target_distribution(q_now)
        noise = stream.normal(0.0, 1.0, size=(n, gan.d_noise))
        components, grads, _ = stage2_loss_and_grads(
            tensors, enc.running, x, graph.adjacency, graph.normalized,
            p_target, noise, cfg, update_running=True)
        if not np.isfinite(components["total"]):
            raise DivergedLoss(f"stage 2 loss became non-finite at epoch {epoch}")
        opt.step({k: grads[k] for k in main_keys})
        trace.append(epoch, components)
    centroids = tensors["centroids"]
    z = encode(x, graph, enc, mode="eval")
    if not np.all(np.isfinite(z)):
        raise NonFinite("stage 2 produced a non-finite embedding")
    q = soft_assign(z, centroids, cfg.alpha)
    assignment = AssignmentState(centroids=centroids, q=q,
                                 p=target_distribution(q),
                                 hard=np.argmax(q, axis=1), alpha=cfg.alpha)
    return Stage2Result(encoder=enc, gan=gan, assignment=assignment, z=z, trace=trace)


# ---------------------------------------------------------------------------
# Refinement: GMM, anchors, label diffusion
# ---------------------------------------------------------------------------

def gmm_cluster(embedding: np.ndarray, n_clusters: int, rng: SeededRng):
    """EM-GMM hard clustering; returns (labels, posteriors, model)."""
    model = gmm_em_fit(embedding, n_clusters, rng)
    posteriors = gmm_posteriors(model, embedding)
    return np.argmax(posteriors, axis=1), posteriors, model


def find_anchors(labels: np.ndarray, kernel, fraction: float = 0.01) -> np.ndarray:
    """Per-cluster highest-agreement spots under the spatial kernel.

    Agreement of spot i is the kernel-weighted count of its neighbors sharing
    its label.  Each cluster contributes ceil(fraction * size) anchors (at
    least one); ties resolve to the lower spot index.
    """
    labels = np.asarray(labels)
    w = kernel.weights
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    agree = np.sum(w * same, axis=1)
    anchors = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n_pick = max(1, int(np.ceil(fraction * members.size)))
        order = members[np.lexsort((members, -agree[members]))]
        anchors.extend(order[:n_pick].tolist())
    return np.array(sorted(anchors), dtype=np.int64)


def propagation_step(y, weights, anchor_idx, anchor_rows):
    """One diffusion sweep: neighbor-average, renormalize, re-pin anchors.

    Rows whose weighted neighborhood carries no mass keep their previous
    value.
    """
    num = weights @ y
    mass = num.sum(axis=1)
    out = np.where(mass[:, None] > 0, num / np.where(mass > 0, mass, 1.0)[:, None], y)
    if anchor_idx.size:
        out[anchor_idx] = anchor_rows
    return out


def diffuse_labels(y0, kernel, anchors, max_iter: int = 50, tol: float = 1e-6):
    """Iterate propagation_step until the update stalls; returns (Y, iters)."""
    anchors = np.asarray(anchors, dtype=np.int64)
    y = np.array(y0, dtype=np.float64, copy=True)
    anchor_rows = y[anchors].copy() if anchors.size else np.empty((0, y.shape[1]))
    for it in range(1, max_iter + 1):
        y_next = propagation_step(y, kernel.weights, anchors, anchor_rows)
        delta = float(np.max(np.abs(y_next - y))) if y.size else 0.0
        y = y_next
        if delta < tol:
            return y, it
    return y, max_iter


def propagate_labels(y0, kernel, anchors, max_iter: int = 50,
                     tol: float = 1e-6) -> np.ndarray:
    """Anchored label diffusion; returns hard labels (argmax, lower index wins)."""
    y, _ = diffuse_labels(y0, kernel, anchors, max_iter=max_iter, tol=tol)
    return np.argmax(y, axis=1)


def refine_labels(labels: np.ndarray, n_clusters: int, kernel,
                  fraction: float = 0.01, max_iter: int = 50,
                  tol: float = 1e-6):
    """Full refinement: anchors from agreement, then anchored diffusion."""
    anchors = find_anchors(labels, kernel, fraction)
    y0 = one_hot(np.asarray(labels, dtype=np.int64), n_clusters)
    refined = propagate_labels(y0, kernel, anchors, max_iter=max_iter, tol=tol)
    return refined, anchors
