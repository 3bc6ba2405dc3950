"""Histology image handling: patch extraction, quality scoring, stain
normalization, a deterministic toy patch featurizer, and neighborhood
smoothing of patch embeddings.

Foreground means luminance below 0.85 * 255; luminance is the usual
0.299 R + 0.587 G + 0.114 B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (CenterOutsideImage, DegenerateStats, DimensionMismatch,
                     SingleRow, TooFewQualifiedPatches, ZeroBandwidth)
from .numerics import kmeans_fit
from .rng import SeededRng
from .spatial_graph import _knn_indices

FOREGROUND_THRESHOLD = 0.85 * 255.0
PATCH_SIZE = 64


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def foreground_mask(rgb: np.ndarray) -> np.ndarray:
    return luminance(rgb) < FOREGROUND_THRESHOLD


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def extract_patches(image: np.ndarray, coords: np.ndarray, scale_factor: float = 1.0,
                    patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Square patches centered at (scale * x, scale * y), reflection-padded.

    The center pixel lands at patch index (patch_size // 2, patch_size // 2).
    Centers are rounded half-to-even; a rounded center outside the image
    raises CenterOutsideImage.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected an (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if min(h, w) < 2:
        raise DimensionMismatch("image must be at least 2x2 for reflection padding")
    half = patch_size // 2
    cx = np.rint(scale_factor * np.asarray(coords)[:, 0]).astype(np.int64)
    cy = np.rint(scale_factor * np.asarray(coords)[:, 1]).astype(np.int64)
    bad = np.flatnonzero((cx < 0) | (cx >= w) | (cy < 0) | (cy >= h))
    if bad.size:
        i = int(bad[0])
        raise CenterOutsideImage(
            f"spot {i}: center ({cx[i]}, {cy[i]}) outside image {w}x{h}")
    padded = np.pad(image, ((half, half), (half, half), (0, 0)), mode="reflect")
    patches = np.empty((len(cx), patch_size, patch_size, 3), dtype=image.dtype)
    for i in range(len(cx)):
        patches[i] = padded[cy[i]: cy[i] + patch_size, cx[i]: cx[i] + patch_size]
    return patches


def _patch_components(patches: np.ndarray):
    """Raw quality components per patch: coverage, contrast, texture, color diversity."""
    n = patches.shape[0]
    cov = np.empty(n)
    con = np.empty(n)
    tex = np.empty(n)
    div = np.empty(n)
    for i in range(n):
        lum = luminance(patches[i])
        cov[i] = np.mean(lum < FOREGROUND_THRESHOLD)
        con[i] = lum.std()
        gy, gx = np.gradient(lum)
        tex[i] = np.mean(np.sqrt(gx * gx + gy * gy))
        div[i] = np.mean(patches[i].astype(np.float64).std(axis=(0, 1)))
    return cov, con, tex, div


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def score_patches(patches: np.ndarray) -> np.ndarray:
    """Quality score in [0, 1]: 0.4 coverage + 0.2 contrast + 0.2 texture
    + 0.2 color diversity, each min-max normalized over the slide."""
    cov, con, tex, div = _patch_components(patches)
    return (0.4 * _minmax(cov) + 0.2 * _minmax(con)
            + 0.2 * _minmax(tex) + 0.2 * _minmax(div))


# ---------------------------------------------------------------------------
# Stain statistics and normalization
# ---------------------------------------------------------------------------

@dataclass
class StainStats:
    mean: np.ndarray   # (3,)
    std: np.ndarray    # (3,)


def slide_stain_stats(image: np.ndarray) -> StainStats:
    """Per-channel foreground moments of a whole slide."""
    mask = foreground_mask(image)
    if not np.any(mask):
        raise DegenerateStats("slide has no foreground pixels")
    pixels = image[mask].astype(np.float64)
    std = pixels.std(axis=0)
    if np.any(std < 1e-3):
        raise DegenerateStats(f"foreground channel std too small: {std}")
    return StainStats(mean=pixels.mean(axis=0), std=std)


def select_target_patches(patches: np.ndarray, rng: SeededRng, *,
                          n_clusters: int = 8, top_fraction: float = 0.2):
    """Pick stain-reference patches and pool their foreground statistics.

    The top ``top_fraction`` of patches by quality score qualify; they are
    clustered (k-means on mean RGB + score) and the best-scoring patch of each
    cluster becomes a reference.  Returns (chosen indices, StainStats pooled
    over the references' foreground pixels).
    """
    scores = score_patches(patches)
    n = len(patches)
    n_qualified = int(np.ceil(top_fraction * n))
    if n_qualified < n_clusters:
        raise TooFewQualifiedPatches(
            f"{n_qualified} qualified patches but {n_clusters} clusters requested")
    order = np.lexsort((np.arange(n), -scores))
    qualified = np.sort(order[:n_qualified])
    feats = np.column_stack([
        patches[qualified].astype(np.float64).mean(axis=(1, 2)),
        scores[qualified],
    ])
    _, labels = kmeans_fit(feats, n_clusters, rng)
    chosen = []
    for c in range(n_clusters):
        members = qualified[labels == c]
        if members.size == 0:
            continue
        best = members[np.lexsort((members, -scores[members]))][0]
        chosen.append(int(best))
    chosen = sorted(chosen)
    pooled = []
    for i in chosen:
        mask = foreground_mask(patches[i])
        if np.any(mask):
            pooled.append(patches[i][mask].astype(np.float64))
    if not pooled:
        raise DegenerateStats("selected reference patches contain no foreground")
    pixels = np.concatenate(pooled, axis=0)
    std = pixels.std(axis=0)
    if np.any(std < 1e-3):
        raise DegenerateStats(f"reference foreground channel std too small: {std}")
    return np.array(chosen, dtype=np.int64), StainStats(mean=pixels.mean(axis=0), std=std)


def stain_normalize(image: np.ndarray, raw: StainStats, target: StainStats) -> np.ndarray:
    """Channel-wise affine recoloring to the target moments.

    out = (I - mu_raw) / sigma_raw * sigma_target + mu_target, clamped to
    [0, 255] and rounded half-to-even back to uint8.
    """
    if np.any(raw.std < 1e-3):
        raise DegenerateStats(f"raw channel std too small: {raw.std}")
    img = image.astype(np.float64)
    out = (img - raw.mean) / raw.std * target.std + target.mean
    return np.rint(np.clip(out, 0.0, 255.0)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Toy featurizer
# ---------------------------------------------------------------------------

TOY_FEATURE_DIM = 48


def toy_features(patches: np.ndarray) -> np.ndarray:
    """Hand-crafted 48-dimensional patch descriptor.

    Per channel: 8-bin intensity histogram (mass fractions, 24) and mean/std
    (6); 4x4 grid of grayscale block means (16); foreground fraction and mean
    gradient magnitude (2).
    """
    n, h, w, _ = patches.shape
    out = np.empty((n, TOY_FEATURE_DIM))
    bh, bw = h // 4, w // 4
    for i in range(n):
        patch = patches[i].astype(np.float64)
        col = 0
        for c in range(3):
            hist = np.bincount(np.minimum(patches[i][:, :, c] // 32, 7).ravel(),
                               minlength=8).astype(np.float64)
            out[i, col: col + 8] = hist / hist.sum()
            col += 8
        out[i, col: col + 3] = patch.mean(axis=(0, 1))
        out[i, col + 3: col + 6] = patch.std(axis=(0, 1))
        col += 6
        lum = luminance(patch)
        blocks = lum[: bh * 4, : bw * 4].reshape(4, bh, 4, bw).mean(axis=(1, 3))
        out[i, col: col + 16] = blocks.ravel()
        col += 16
        out[i, col] = np.mean(lum < FOREGROUND_THRESHOLD)
        gy, gx = np.gradient(lum)
        out[i, col + 1] = np.mean(np.sqrt(gx * gx + gy * gy))
    return out


def standardize_features(features: np.ndarray) -> np.ndarray:
    """Column z-scoring over the slide; constant columns map to 0."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (features - mu) / sd


def encode_patches(patches: np.ndarray) -> np.ndarray:
    """Toy featurizer followed by slide-level standardization."""
    return standardize_features(toy_features(patches))


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

def smooth_embeddings(features: np.ndarray, coords: np.ndarray, k: int = 6,
                      lam: float = 0.3) -> np.ndarray:
    """Blend each embedding with a Gaussian-weighted neighbor average.

    v~_i = (1 - lam) v_i + lam * sum_j w_ij v_j over i's k nearest neighbors,
    with w_ij proportional to exp(-d_ij^2 / (2 sigma^2)), normalized to sum to
    one per spot; sigma is the median retained neighbor distance.
    """
    features = np.asarray(features, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if features.shape[0] != coords.shape[0]:
        raise DimensionMismatch(
            f"{features.shape[0]} embeddings vs {coords.shape[0]} coordinates")
    if features.shape[0] < 2:
        raise SingleRow("smoothing needs at least two spots")
    idx = _knn_indices(coords, min(k, features.shape[0] - 1))
    diffs = coords[:, None, :] - coords[idx]
    d2 = np.sum(diffs * diffs, axis=2)
    sigma = float(np.median(np.sqrt(d2)))
    if sigma <= 0:
        raise ZeroBandwidth("median neighbor distance is zero; coincident spots")
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    w /= w.sum(axis=1, keepdims=True)
    neighbor_avg = np.einsum("nk,nkd->nd", w, features[idx])
    return (1.0 - lam) * features + lam * neighbor_avg
