"""Stage III: multi-head cross-attention fusion of expression latents and
smoothed image embeddings.

Both modalities are linearly projected to a shared width d.  Gene-enhanced
embeddings attend from gene queries to image keys/values (and vice versa when
bidirectional); each output adds its own projected input as a residual.  The
training objective aligns the two similarity structures (symmetric KL over
row-softmaxed cosine similarities), ties matched rows together (symmetric
InfoNCE), and penalizes embedding norms.  Gradients are hand-derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DivergedLoss, RowMisalignment, SingleRow
from .gene_encoder import LossTrace, encode, encoder_backward, encoder_forward
from .optim import Adam
from .rng import SeededRng

_TINY = 1e-12


@dataclass
class Stage3Config:
    epochs: int = 200
    lr: float = 1e-3
    dim: int = 64
    heads: int = 4
    alpha: float = 0.7
    tau: float = 0.12
    direction: str = "image_to_gene"   # adopted variant; "bidirectional" available
    lambda_sdm: float = 1.0
    lambda_con: float = 1.0
    lambda_reg: float = 0.01
    unfreeze_encoder: bool = False


@dataclass
class FusionParams:
    d_gene: int
    d_image: int
    dim: int
    heads: int
    direction: str
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d_gene: int, d_image: int, dim: int, heads: int,
             direction: str, rng: SeededRng):
        if dim % heads != 0:
            raise DimensionMismatch(f"dim {dim} not divisible by heads {heads}")
        if direction not in ("bidirectional", "image_to_gene"):
            raise DimensionMismatch(f"unknown direction {direction!r}")

        def w(shape, fan_in, stream):
            return rng.split(stream).normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        tensors = {
            "fus.PG": w((d_gene, dim), d_gene, "PG"),
            "fus.PI": w((d_image, dim), d_image, "PI"),
            "fus.QG": w((d_gene, dim), d_gene, "QG"),
            "fus.KG": w((d_gene, dim), d_gene, "KG"),
            "fus.VG": w((d_gene, dim), d_gene, "VG"),
            "fus.QI": w((d_image, dim), d_image, "QI"),
            "fus.KI": w((d_image, dim), d_image, "KI"),
            "fus.VI": w((d_image, dim), d_image, "VI"),
        }
        return cls(d_gene=d_gene, d_image=d_image, dim=dim, heads=heads,
                   direction=direction, tensors=tensors)


@dataclass
class FusedEmbedding:
    h_gene: np.ndarray
    h_image: np.ndarray
    h_fusion: np.ndarray
    alpha: float


def _softmax_rows(logits):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def _attention_forward(q, k, v, heads):
    n, d = q.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    out = np.empty_like(q)
    attn = []
    for h in range(heads):
        hs = slice(h * dh, (h + 1) * dh)
        logits = (q[:, hs] @ k[:, hs].T) * scale
        a = _softmax_rows(logits)
        attn.append(a)
        out[:, hs] = a @ v[:, hs]
    return out, attn


def _attention_backward(dout, q, k, v, attn, heads):
    n, d = q.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h in range(heads):
        hs = slice(h * dh, (h + 1) * dh)
        a = attn[h]
        da = dout[:, hs] @ v[:, hs].T
        dv[:, hs] = a.T @ dout[:, hs]
        dlogits = a * (da - np.sum(da * a, axis=1, keepdims=True))
        dq[:, hs] = (dlogits @ k[:, hs]) * scale
        dk[:, hs] = (dlogits.T @ q[:, hs]) * scale
    return dq, dk, dv


def _forward(z, v, params: FusionParams):
    t = params.tensors
    heads = params.heads
    zp = z @ t["fus.PG"]
    vp = v @ t["fus.PI"]
    qg = z @ t["fus.QG"]
    ki = v @ t["fus.KI"]
    vi = v @ t["fus.VI"]
    og, attn_g = _attention_forward(qg, ki, vi, heads)
    hg = og + zp
    cache = dict(z=z, v=v, zp=zp, vp=vp, qg=qg, ki=ki, vi=vi, attn_g=attn_g)
    if params.direction == "bidirectional":
        qi = v @ t["fus.QI"]
        kg = z @ t["fus.KG"]
        vg = z @ t["fus.VG"]
        oi, attn_i = _attention_forward(qi, kg, vg, heads)
        hi = oi + vp
        cache.update(qi=qi, kg=kg, vg=vg, attn_i=attn_i)
    else:
        hi = vp
    return hg, hi, cache


def cross_attend(z, v, params: FusionParams):
    """Cross-attended embeddings (h_gene, h_image) at shared width."""
    if z.shape[0] != v.shape[0]:
        raise RowMisalignment(f"{z.shape[0]} latents vs {v.shape[0]} image embeddings")
    hg, hi, _ = _forward(np.asarray(z, dtype=np.float64),
                         np.asarray(v, dtype=np.float64), params)
    return hg, hi


def _backward(dhg, dhi, cache, params: FusionParams):
    t = params.tensors
    z, v = cache["z"], cache["v"]
    grads = {k: np.zeros_like(arr) for k, arr in t.items()}
    dz = np.zeros_like(z)
    grads["fus.PG"] += z.T @ dhg
    dz += dhg @ t["fus.PG"].T
    dqg, dki, dvi = _attention_backward(dhg, cache["qg"], cache["ki"], cache["vi"],
                                        cache["attn_g"], params.heads)
    grads["fus.QG"] += z.T @ dqg
    grads["fus.KI"] += v.T @ dki
    grads["fus.VI"] += v.T @ dvi
    dz += dqg @ t["fus.QG"].T
    if params.direction == "bidirectional":
        grads["fus.PI"] += v.T @ dhi
        dqi, dkg, dvg = _attention_backward(dhi, cache["qi"], cache["kg"], cache["vg"],
                                            cache["attn_i"], params.heads)
        grads["fus.QI"] += v.T @ dqi
        grads["fus.KG"] += z.T @ dkg
        grads["fus.VG"] += z.T @ dvg
        dz += dkg @ t["fus.KG"].T + dvg @ t["fus.VG"].T
    else:
        grads["fus.PI"] += v.T @ dhi
    return grads, dz


def fuse(h_gene, h_image, alpha: float = 0.7) -> np.ndarray:
    """Convex combination alpha * h_gene + (1 - alpha) * h_image."""
    if h_gene.shape != h_image.shape:
        raise RowMisalignment(f"shape mismatch {h_gene.shape} vs {h_image.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise DimensionMismatch(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * h_gene + (1.0 - alpha) * h_image


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _normalize_rows(h):
    r = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.maximum(r, _TINY), r


def _normalize_rows_backward(dhn, hn, r):
    return (dhn - hn * np.sum(hn * dhn, axis=1, keepdims=True)) / np.maximum(r, _TINY)


def _masked_softmax_offdiag(logits):
    """Row softmax excluding the diagonal; diagonal of the result is 0."""
    n = logits.shape[0]
    work = logits.copy()
    np.fill_diagonal(work, -np.inf)
    m = work.max(axis=1, keepdims=True)
    e = np.exp(work - m)
    np.fill_diagonal(e, 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _sdm_value(p_i, p_g):
    """Mean over rows of 0.5 [KL(P_I || P_G) + KL(P_G || P_I)] on off-diagonals."""
    off = ~np.eye(p_i.shape[0], dtype=bool)
    log_ratio = np.zeros_like(p_i)
    log_ratio[off] = np.log(p_i[off]) - np.log(p_g[off])
    kl_ig = np.sum(p_i * log_ratio, axis=1)
    kl_gi = np.sum(p_g * (-log_ratio), axis=1)
    return float(np.mean(0.5 * (kl_ig + kl_gi))), log_ratio, kl_ig, kl_gi


def loss_sdm(h_image, h_gene, tau: float = 0.12) -> float:
    """Similarity-structure alignment across modalities.

    Cosine self-similarities of each modality are row-softmaxed at temperature
    ``tau`` with the diagonal excluded; the loss is the symmetric KL between
    the two row distributions, averaged over rows.
    """
    if h_image.shape != h_gene.shape:
        raise RowMisalignment(f"shape mismatch {h_image.shape} vs {h_gene.shape}")
    n = h_image.shape[0]
    if n < 2:
        raise SingleRow("similarity distribution needs at least two rows")
    hin, _ = _normalize_rows(np.asarray(h_image, dtype=np.float64))
    hgn, _ = _normalize_rows(np.asarray(h_gene, dtype=np.float64))
    p_i = _masked_softmax_offdiag((hin @ hin.T) / tau)
    p_g = _masked_softmax_offdiag((hgn @ hgn.T) / tau)
    return _sdm_value(p_i, p_g)[0]


def loss_contrastive(h_image, h_gene, tau: float = 0.12) -> float:
    """Symmetric InfoNCE over L2-normalized rows at temperature ``tau``."""
    if h_image.shape != h_gene.shape:
        raise RowMisalignment(f"shape mismatch {h_image.shape} vs {h_gene.shape}")
    n = h_image.shape[0]
    if n < 2:
        return 0.0
    hin, _ = _normalize_rows(np.asarray(h_image, dtype=np.float64))
    hgn, _ = _normalize_rows(np.asarray(h_gene, dtype=np.float64))
    m = (hin @ hgn.T) / tau
    pa = _softmax_rows(m)
    pb = _softmax_rows(m.T)
    ii = np.arange(n)
    return float(-0.5 * (np.mean(np.log(pa[ii, ii])) + np.mean(np.log(pb[ii, ii]))))


def embedding_norm_penalty(h_image, h_gene) -> float:
    """Frobenius norms of both embeddings, scaled by 1/sqrt(n * d)."""
    n, d = h_image.shape
    scale = 1.0 / np.sqrt(n * d)
    return float((np.linalg.norm(h_image) + np.linalg.norm(h_gene)) * scale)


# ---------------------------------------------------------------------------
# Stage objective
# ---------------------------------------------------------------------------

def stage3_losses_and_embedding_grads(hg, hi, cfg: Stage3Config):
    """Losses of Eq-style stage-III objective and gradients w.r.t. H_G, H_I."""
    n, d = hg.shape
    dhg = np.zeros_like(hg)
    dhi = np.zeros_like(hi)

    hgn, rg = _normalize_rows(hg)
    hin, ri = _normalize_rows(hi)
    dhgn = np.zeros_like(hg)
    dhin = np.zeros_like(hi)

    # similarity-structure alignment
    if n >= 2:
        p_i = _masked_softmax_offdiag((hin @ hin.T) / cfg.tau)
        p_g = _masked_softmax_offdiag((hgn @ hgn.T) / cfg.tau)
        l_sdm, log_ratio, kl_ig, kl_gi = _sdm_value(p_i, p_g)
        w = cfg.lambda_sdm / (2.0 * n)
        dli = w * (p_i * (log_ratio - kl_ig[:, None]) + (p_i - p_g))
        dlg = w * (p_g * (-log_ratio - kl_gi[:, None]) + (p_g - p_i))
        np.fill_diagonal(dli, 0.0)
        np.fill_diagonal(dlg, 0.0)
        dsi = (dli + dli.T) / cfg.tau
        dsg = (dlg + dlg.T) / cfg.tau
        dhin += dsi @ hin
        dhgn += dsg @ hgn
    else:
        l_sdm = 0.0

    # symmetric InfoNCE
    if n >= 2:
        m = (hin @ hgn.T) / cfg.tau
        pa = _softmax_rows(m)
        pb = _softmax_rows(m.T)
        ii = np.arange(n)
        l_con = float(-0.5 * (np.mean(np.log(pa[ii, ii])) + np.mean(np.log(pb[ii, ii]))))
        dm = (pa - np.eye(n)) / (2.0 * n) + ((pb - np.eye(n)) / (2.0 * n)).T
        dm *= cfg.lambda_con
        dhin += dm @ hgn / cfg.tau
        dhgn += dm.T @ hin / cfg.tau
    else:
        l_con = 0.0

    dhg += _normalize_rows_backward(dhgn, hgn, rg)
    dhi += _normalize_rows_backward(dhin, hin, ri)

    # norm regularizer on the raw embeddings
    scale = 1.0 / np.sqrt(n * d)
    norm_g = np.linalg.norm(hg)
    norm_i = np.linalg.norm(hi)
    l_reg = float((norm_i + norm_g) * scale)
    if norm_g > 0:
        dhg += cfg.lambda_reg * scale * hg / norm_g
    if norm_i > 0:
        dhi += cfg.lambda_reg * scale * hi / norm_i

    total = cfg.lambda_sdm * l_sdm + cfg.lambda_con * l_con + cfg.lambda_reg * l_reg
    comps = {"sdm": l_sdm, "con": l_con, "reg": l_reg, "total": float(total)}
    return comps, dhg, dhi


def stage3_loss_and_grads(params: FusionParams, z, v, cfg: Stage3Config):
    """Stage-III objective and analytic gradients over FusionParams.

    :returns: (components, grads over params.tensors, dL/dZ)
    """
    hg, hi, cache = _forward(z, v, params)
    comps, dhg, dhi = stage3_losses_and_embedding_grads(hg, hi, cfg)
    grads, dz = _backward(dhg, dhi, cache, params)
    return comps, grads, dz


@dataclass
class Stage3Result:
    params: FusionParams
    fused: FusedEmbedding
    trace: LossTrace


def train_stage3(z, v, cfg: Stage3Config, rng: SeededRng, *,
                 encoder=None, x=None, graph=None) -> Stage3Result:
    """Adam training of the fusion parameters (encoder frozen by default).

    With ``unfreeze_encoder`` the attention gradients also flow back into the
    supplied encoder through its train-mode forward pass.
    """
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if z.shape[0] != v.shape[0]:
        raise RowMisalignment(f"{z.shape[0]} latents vs {v.shape[0]} image embeddings")
    if z.shape[0] < 2:
        raise SingleRow("similarity alignment needs at least two spots")
    params = FusionParams.init(z.shape[1], v.shape[1], cfg.dim, cfg.heads,
                               cfg.direction, rng.split("fusion-init"))
    unfreeze = cfg.unfreeze_encoder and encoder is not None and x is not None \
        and graph is not None
    tensors = dict(params.tensors)
    if unfreeze:
        tensors.update(encoder.tensors)
    opt = Adam(tensors, lr=cfg.lr)
    trace = LossTrace(["sdm", "con", "reg", "total"])
    for epoch in range(cfg.epochs):
        if unfreeze:
            z_cur, enc_cache = encoder_forward(x, graph.normalized, encoder.tensors,
                                               encoder.running, train=True,
                                               update_running=True)
        else:
            z_cur = z
        comps, grads, dz = stage3_loss_and_grads(params, z_cur, v, cfg)
        if not np.isfinite(comps["total"]):
            raise DivergedLoss(f"stage 3 loss became non-finite at epoch {epoch}")
        if unfreeze:
            enc_grads, _ = encoder_backward(dz, enc_cache, encoder.tensors)
            grads = {**grads, **enc_grads}
            missing = [k for k in tensors if k not in grads]
            for k in missing:
                grads[k] = np.zeros_like(tensors[k])
        opt.step(grads)
        trace.append(epoch, comps)
    z_final = encode(x, graph, encoder, mode="eval") if unfreeze else z
    hg, hi, _ = _forward(z_final, v, params)
    fused = FusedEmbedding(h_gene=hg, h_image=hi,
                           h_fusion=fuse(hg, hi, cfg.alpha), alpha=cfg.alpha)
    return Stage3Result(params=params, fused=fused, trace=trace)
