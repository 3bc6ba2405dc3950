"""End-to-end pipeline: preprocess, spatial graph, three training stages,
image branch, mixture clustering, anchored label diffusion, metrics.

Everything downstream of the dataset bytes is a pure function of (data,
config, seed): reruns with the same manifest write byte-identical artifacts.
"""

from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import Stage2Config, gmm_cluster, refine_labels, train_stage2
from .config import RunConfig, config_to_dict
from .dataio import Dataset, load_dataset, preprocess, write_embeddings
from .errors import MissingEmbeddingFile
from .fusion import Stage3Config, train_stage3
from .gene_encoder import Stage1Config, train_stage1
from .image_features import (
    encode_patches,
    extract_patches,
    select_target_patches,
    slide_stain_stats,
    smooth_embeddings,
    stain_normalize,
)
from .metrics import MetricsReport, evaluate_labels
from .rng import SeededRng
from .spatial_graph import build_gaussian_kernel, build_knn_graph

log = logging.getLogger("spotfusion")

# qualitative palette, cycled when labels exceed 10
PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


def write_svg_scatter(path, coords, labels, radius: float = 2.5) -> None:
    """One circle per spot, colored by label, y flipped to screen convention."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    size = 640.0
    pad = 3.0 * radius
    scale = (size - 2 * pad) / span.max()
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(size)}" '
        f'height="{int(size)}" viewBox="0 0 {int(size)} {int(size)}">'
    ]
    for (x, y), lab in zip(coords, labels):
        px = pad + (x - lo[0]) * scale
        py = size - pad - (y - lo[1]) * scale
        color = PALETTE[int(lab) % len(PALETTE)]
        lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{radius}" fill="{color}"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_labels_csv(path, barcodes, labels) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("barcode,label\n")
        for bc, lab in zip(barcodes, labels):
            fh.write(f"{bc},{int(lab)}\n")


def _stage1_config(cfg: RunConfig) -> Stage1Config:
    return Stage1Config(
        epochs=cfg.stage1_epochs, lr=cfg.stage1_lr, d1=cfg.enc_d1,
        d2_hidden=cfg.enc_hidden, d2=cfg.enc_d2, d_noise=cfg.noise_dim,
        gan_hidden=cfg.gan_hidden, mask_ratio=cfg.mask_ratio,
        mask_alpha=cfg.mask_alpha, lambda_rec=cfg.lambda_rec,
        lambda_graph=cfg.lambda_graph, lambda_mask=cfg.lambda_mask,
        lambda_gan=cfg.lambda_gan, lambda_kl=cfg.lambda_kl)


def _stage2_config(cfg: RunConfig) -> Stage2Config:
    return Stage2Config(
        epochs=cfg.stage2_epochs, lr=cfg.stage2_lr,
        refresh_interval=cfg.refresh_interval, stop_fraction=cfg.stop_delta,
        alpha=cfg.dec_alpha, lambda_rec=cfg.lambda_rec,
        lambda_graph=cfg.lambda_graph, lambda_dec=cfg.lambda_dec,
        lambda_gan=cfg.lambda_gan, lambda_kl=cfg.lambda_kl)


def _stage3_config(cfg: RunConfig) -> Stage3Config:
    return Stage3Config(
        epochs=cfg.stage3_epochs, lr=cfg.stage3_lr, dim=cfg.fusion_dim,
        heads=cfg.fusion_heads, alpha=cfg.alpha, tau=cfg.tau,
        direction=cfg.direction, lambda_sdm=cfg.lambda_sdm,
        lambda_con=cfg.lambda_con, lambda_reg=cfg.lambda_reg,
        unfreeze_encoder=cfg.unfreeze_encoder)


def build_image_embeddings(dataset: Dataset, coords, cfg: RunConfig,
                           rng: SeededRng, out_dir: Path | None = None):
    """Smoothed per-spot image embeddings, or None when no image source exists.

    Toy path: stain-normalize the slide against pooled reference-patch
    statistics, re-extract patches, featurize, standardize, then smooth.
    Precomputed path: rows come straight from the supplied embedding matrix.
    """
    if cfg.image_encoder == "precomputed":
        if dataset.patch_embeddings is None:
            raise MissingEmbeddingFile("image_encoder=precomputed but no patch_embeddings.bin")
        features = np.asarray(dataset.patch_embeddings, dtype=np.float64)
    else:
        if dataset.image is None:
            log.warning("no image.png in dataset; image branch skipped")
            return None
        image = dataset.image
        patches = extract_patches(image, coords, dataset.scale_factor)
        _, target_stats = select_target_patches(patches, rng.split("stain-targets"),
                                                n_clusters=cfg.stain_clusters)
        raw_stats = slide_stain_stats(image)
        normalized = stain_normalize(image, raw_stats, target_stats)
        if out_dir is not None:
            from PIL import Image
            Image.fromarray(normalized).save(out_dir / "normalized_image.png")
        patches = extract_patches(normalized, coords, dataset.scale_factor)
        features = encode_patches(patches)
    smoothed = smooth_embeddings(features, coords, k=cfg.smooth_k,
                                 lam=cfg.smooth_lambda)
    if out_dir is not None:
        write_embeddings(out_dir / "embeddings_smoothed.bin", smoothed)
    return smoothed


@dataclass
class TrainedModels:
    pre: object
    kept: Dataset
    graph: object
    stage1: object
    stage2: object
    stage3: object          # None on the expression-only path
    smoothed: np.ndarray | None
    fused: np.ndarray
    out_dir: Path


def train_models(cfg: RunConfig) -> TrainedModels:
    """Stages I-III (III only when an image source exists and is enabled)."""
    t0 = time.monotonic()
    out_dir = Path(cfg.out) if cfg.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(cfg.seed)

    dataset = load_dataset(cfg.data)
    pre = preprocess(dataset, n_hvg=cfg.hvg, pca_components=cfg.pca_components,
                     do_zscale=cfg.zscale)
    kept = dataset.subset(pre.kept_spots)
    x = pre.values
    coords = kept.coords
    log.info("preprocessed %d spots x %d columns", x.shape[0], x.shape[1])

    graph = build_knn_graph(coords, cfg.graph_k)

    r1 = train_stage1(x, graph, _stage1_config(cfg), rng.split("stage1"))
    r1.trace.write_csv(out_dir / "losses_stage1.csv")
    log.info("stage 1 done (%.1fs)", time.monotonic() - t0)

    r2 = train_stage2(x, graph, cfg.clusters, r1.encoder, r1.gan,
                      _stage2_config(cfg), rng.split("stage2"))
    r2.trace.write_csv(out_dir / "losses_stage2.csv")
    z = r2.z
    write_embeddings(out_dir / "embeddings_latent.bin", z)
    log.info("stage 2 done (%.1fs)", time.monotonic() - t0)

    smoothed = None
    r3 = None
    if cfg.use_image:
        smoothed = build_image_embeddings(kept, coords, cfg,
                                          rng.split("image"), out_dir)
    if smoothed is not None:
        r3 = train_stage3(z, smoothed, _stage3_config(cfg), rng.split("stage3"),
                          encoder=r2.encoder, x=x, graph=graph)
        r3.trace.write_csv(out_dir / "losses_stage3.csv")
        fused = r3.fused.h_fusion
        log.info("stage 3 done (%.1fs)", time.monotonic() - t0)
    else:
        # expression-only path: no image source or image branch disabled
        fused = z
    write_embeddings(out_dir / "embeddings_fused.bin", fused)
    return TrainedModels(pre=pre, kept=kept, graph=graph, stage1=r1, stage2=r2,
                         stage3=r3, smoothed=smoothed, fused=fused,
                         out_dir=out_dir)


@dataclass
class PipelineResult:
    barcodes: list
    labels: np.ndarray
    pre_diffusion_labels: np.ndarray
    anchors: np.ndarray
    z: np.ndarray
    fused: np.ndarray
    report: MetricsReport | None
    out_dir: Path


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    t0 = time.monotonic()
    models = train_models(cfg)
    out_dir = models.out_dir
    pre = models.pre
    kept = models.kept
    coords = kept.coords
    z = models.stage2.z
    fused = models.fused
    rng = SeededRng(cfg.seed)

    hard, _, _ = gmm_cluster(fused, cfg.clusters, rng.split("gmm"))
    kernel = build_gaussian_kernel(coords, cfg.graph_k)
    refined, anchors = refine_labels(hard, cfg.clusters, kernel,
                                     fraction=cfg.anchor_fraction,
                                     max_iter=cfg.diffusion_max_iter,
                                     tol=cfg.diffusion_tol)
    write_labels_csv(out_dir / "labels.csv", kept.barcodes, refined)
    write_svg_scatter(out_dir / "clusters.svg", coords, refined)

    report = None
    if kept.labels is not None:
        report = evaluate_labels(refined, np.asarray(kept.labels))
        with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info("ari=%.4f ami=%.4f completeness=%.4f",
                 report.ari, report.ami, report.completeness)

    manifest = {
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "preprocess": pre.manifest,
        "n_spots": len(kept.barcodes),
        "versions": {
            "spotfusion": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("pipeline finished in %.1fs", time.monotonic() - t0)

    return PipelineResult(barcodes=kept.barcodes, labels=refined,
                          pre_diffusion_labels=hard, anchors=anchors, z=z,
                          fused=fused, report=report, out_dir=out_dir)
