"""Spot neighborhood graphs.

Two views of the same neighborhoods are used downstream:

* a binary k-nearest-neighbor adjacency (union-symmetrized, self loops added)
  with symmetric degree normalization, which drives graph convolutions and the
  adjacency reconstruction target;
* a directed Gaussian kernel over each spot's own k nearest neighbors, which
  drives anchor scoring and label diffusion.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, TooFewSpots, ZeroBandwidth
from .numerics import pairwise_sq_dists, require_finite

log = logging.getLogger(__name__)


@dataclass
class SpatialGraph:
    adjacency: np.ndarray       # (n, n) binary, symmetric, unit diagonal
    normalized: np.ndarray      # D^-1/2 A D^-1/2
    degrees: np.ndarray         # (n,)
    k: int


@dataclass
class KernelWeights:
    weights: np.ndarray         # (n, n); row i nonzero only on i's k nearest
    sigma: float
    k: int


def _knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """Each row's k nearest other rows (Euclidean; ties to the lower index)."""
    coords = np.asarray(coords, dtype=np.float64)
    require_finite(coords, "coords")
    n = coords.shape[0]
    if k < 1:
        raise DimensionMismatch(f"k must be >= 1, got {k}")
    if n <= k:
        raise TooFewSpots(f"need more than k={k} spots, got {n}")
    d2 = pairwise_sq_dists(coords, coords)
    np.fill_diagonal(d2, np.inf)
    idx = np.empty((n, k), dtype=np.int64)
    cols = np.arange(n)
    for i in range(n):
        order = np.lexsort((cols, d2[i]))
        idx[i] = order[:k]
    return idx


def _split_duplicates(coords: np.ndarray) -> np.ndarray:
    """Perturb repeated coordinate rows by 1e-9 so neighbor ranks are defined."""
    seen: dict = {}
    coords = np.asarray(coords, dtype=np.float64)
    out = coords.copy()
    n_dup = 0
    for i in range(coords.shape[0]):
        key = coords[i].tobytes()
        j = seen.get(key, 0)
        if j:
            out[i] += 1e-9 * j
            n_dup += 1
        seen[key] = j + 1
    if n_dup:
        log.warning("%d duplicate coordinate row(s) perturbed by 1e-9", n_dup)
    return out


def build_knn_graph(coords: np.ndarray, k: int = 6) -> SpatialGraph:
    """Union-symmetrized kNN adjacency with self loops and D^-1/2 A D^-1/2."""
    idx = _knn_indices(_split_duplicates(coords), k)
    n = idx.shape[0]
    adjacency = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    adjacency[rows, idx.ravel()] = 1.0
    adjacency = np.maximum(adjacency, adjacency.T)
    np.fill_diagonal(adjacency, 1.0)
    normalized, degrees = normalize_adjacency(adjacency)
    return SpatialGraph(adjacency=adjacency, normalized=normalized, degrees=degrees, k=k)


def normalize_adjacency(adjacency: np.ndarray):
    """Symmetric degree normalization of a nonnegative adjacency matrix."""
    degrees = adjacency.sum(axis=1)
    if np.any(degrees <= 0):
        raise ZeroBandwidth("adjacency has an isolated row with zero degree")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    # outer product first: s_i*s_j is commutative, so the result is exactly
    # symmetric whenever the input adjacency is
    return adjacency * np.outer(inv_sqrt, inv_sqrt), degrees


def build_gaussian_kernel(coords: np.ndarray, k: int = 6) -> KernelWeights:
    """Directed Gaussian neighborhood kernel.

    W_ij = exp(-d_ij^2 / sigma^2) for j among i's k nearest neighbors, else 0,
    with sigma the median distance over all retained neighbor pairs.
    """
    idx = _knn_indices(coords, k)
    n = idx.shape[0]
    d2 = pairwise_sq_dists(coords, coords)
    rows = np.repeat(np.arange(n), k)
    neighbor_d = np.sqrt(d2[rows, idx.ravel()])
    sigma = float(np.median(neighbor_d))
    if sigma <= 0.0:
        raise ZeroBandwidth("median neighbor distance is zero; coincident spots")
    weights = np.zeros((n, n))
    weights[rows, idx.ravel()] = np.exp(-d2[rows, idx.ravel()] / (sigma * sigma))
    return KernelWeights(weights=weights, sigma=sigma, k=k)


def write_edges(path, matrix: np.ndarray):
    """Dump nonzero entries as i,j,weight rows (row-major order)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "weight"])
        ii, jj = np.nonzero(matrix)
        for i, j in zip(ii, jj):
            writer.writerow([int(i), int(j), repr(float(matrix[i, j]))])
