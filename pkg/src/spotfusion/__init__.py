"""Spatial transcriptomics clustering from expression, spot locations, and
the stained tissue image.

Pipeline: expression preprocessing -> spatial kNN graph -> masked dual-branch
graph autoencoder -> deep embedded clustering refinement -> cross-attention
fusion with smoothed image features -> Gaussian mixture labels -> anchored
label diffusion.

Submodules import numpy; this top-level module resolves its exports lazily so
that the CLI can cap BLAS threads before numpy first loads.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401  (re-exported, stdlib-only)
    ConfigError,
    DataError,
    NumericalError,
    SpotFusionError,
)

_EXPORTS = {
    # rng / numerics
    "SeededRng": ".rng",
    "kmeans_fit": ".numerics",
    "pca_fit_transform": ".numerics",
    "gmm_em_fit": ".numerics",
    "gmm_posteriors": ".numerics",
    "gradient_check": ".numerics",
    # data
    "Dataset": ".dataio",
    "SyntheticSpec": ".dataio",
    "generate_synthetic": ".dataio",
    "load_dataset": ".dataio",
    "save_dataset": ".dataio",
    "load_labels_csv": ".dataio",
    "preprocess": ".dataio",
    "apply_manifest": ".dataio",
    "read_embeddings": ".dataio",
    "write_embeddings": ".dataio",
    # graph
    "SpatialGraph": ".spatial_graph",
    "build_knn_graph": ".spatial_graph",
    "build_gaussian_kernel": ".spatial_graph",
    "normalize_adjacency": ".spatial_graph",
    # stage 1
    "Stage1Config": ".gene_encoder",
    "train_stage1": ".gene_encoder",
    "encode": ".gene_encoder",
    "fisher_mmd": ".gene_encoder",
    # stage 2 and refinement
    "Stage2Config": ".clustering",
    "train_stage2": ".clustering",
    "soft_assign": ".clustering",
    "target_distribution": ".clustering",
    "loss_dec": ".clustering",
    "consistency_loss": ".clustering",
    "gmm_cluster": ".clustering",
    "find_anchors": ".clustering",
    "propagate_labels": ".clustering",
    "refine_labels": ".clustering",
    # image branch
    "extract_patches": ".image_features",
    "score_patches": ".image_features",
    "select_target_patches": ".image_features",
    "stain_normalize": ".image_features",
    "encode_patches": ".image_features",
    "smooth_embeddings": ".image_features",
    # stage 3
    "Stage3Config": ".fusion",
    "train_stage3": ".fusion",
    "cross_attend": ".fusion",
    "fuse": ".fusion",
    "loss_sdm": ".fusion",
    "loss_contrastive": ".fusion",
    # metrics
    "MetricsReport": ".metrics",
    "metric_ari": ".metrics",
    "metric_ami": ".metrics",
    "metric_completeness": ".metrics",
    "evaluate_labels": ".metrics",
    # config / pipeline
    "RunConfig": ".config",
    "load_config": ".config",
    "run_pipeline": ".pipeline",
    "train_models": ".pipeline",
}


def __getattr__(name):
    target = _EXPORTS.get(name)
    if target is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(target, __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
