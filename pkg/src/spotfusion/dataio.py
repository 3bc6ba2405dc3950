"""Dataset loading, preprocessing, file formats, and the synthetic generator.

On-disk layout of a dataset directory:

    expression.csv        barcode,<gene>,...   integer counts, one row per spot
    coords.csv            barcode,x,y          spot centers
    labels.csv            barcode,label        optional ground truth
    image.png             8-bit RGB histology raster, optional
    patch_embeddings.bin  precomputed patch features, optional (SPFE container)
    meta.cfg              key=value metadata; scale_factor maps coords to pixels

Expression row order is canonical: coords, labels, and embeddings are aligned
to it on load.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BarcodeMismatch, DimensionMismatch, EmbeddingShapeMismatch,
                     EmptyResult, MalformedRow, MissingEmbeddingFile,
                     MissingFile, RowMisalignment)
from .numerics import pairwise_sq_dists, pca_fit_transform, require_finite
from .rng import SeededRng

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"SPFE"
EMBEDDING_VERSION = 1


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    barcodes: list
    expression: np.ndarray          # (n, g) int64 counts
    gene_names: list
    coords: np.ndarray              # (n, 2) float64, expression row order
    labels: list | None = None
    image: np.ndarray | None = None  # (h, w, 3) uint8
    scale_factor: float = 1.0
    patch_embeddings: np.ndarray | None = None  # (n, d_v) float32
    meta: dict = field(default_factory=dict)

    @property
    def n_spots(self) -> int:
        return self.expression.shape[0]

    def subset(self, keep: np.ndarray) -> "Dataset":
        """Row-subset every spot-aligned field (genes untouched)."""
        keep = np.asarray(keep)
        return Dataset(
            barcodes=[self.barcodes[i] for i in keep],
            expression=self.expression[keep],
            gene_names=list(self.gene_names),
            coords=self.coords[keep],
            labels=None if self.labels is None else [self.labels[i] for i in keep],
            image=self.image,
            scale_factor=self.scale_factor,
            patch_embeddings=None if self.patch_embeddings is None else self.patch_embeddings[keep],
            meta=dict(self.meta),
        )


def _read_csv_rows(path: Path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if row:
                yield lineno, row


def _load_expression(path: Path):
    rows = _read_csv_rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise MalformedRow(f"{path}: empty file")
    if len(header) < 2 or header[0] != "barcode":
        raise MalformedRow(f"{path}:1: header must start with 'barcode' and list genes")
    gene_names = header[1:]
    barcodes, counts = [], []
    for lineno, row in rows:
        if len(row) != len(header):
            raise MalformedRow(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            counts.append([int(v) for v in row[1:]])
        except ValueError as exc:
            raise MalformedRow(f"{path}:{lineno}: non-integer count ({exc})")
        barcodes.append(row[0])
    if not barcodes:
        raise EmptyResult(f"{path}: no spots")
    return barcodes, np.asarray(counts, dtype=np.int64), gene_names


def _load_keyed_floats(path: Path, n_values: int, what: str):
    out = {}
    rows = _read_csv_rows(path)
    _, header = next(rows)
    if len(header) != n_values + 1:
        raise MalformedRow(f"{path}:1: expected {n_values + 1} columns in header")
    for lineno, row in rows:
        if len(row) != n_values + 1:
            raise MalformedRow(f"{path}:{lineno}: expected {n_values + 1} columns, got {len(row)}")
        try:
            out[row[0]] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise MalformedRow(f"{path}:{lineno}: bad {what} value ({exc})")
    return out


def _load_labels(path: Path):
    out = {}
    rows = _read_csv_rows(path)
    next(rows)  # header
    for lineno, row in rows:
        if len(row) != 2:
            raise MalformedRow(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        out[row[0]] = row[1]
    return out


def load_labels_csv(path) -> dict:
    """barcode -> label mapping from a two-column labels.csv."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    return _load_labels(path)


def read_meta(path: Path) -> dict:
    meta = {}
    for lineno, raw in enumerate(open(path).read().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedRow(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_meta(path: Path, meta: dict):
    with open(path, "w") as fh:
        for key in meta:
            fh.write(f"{key}={meta[key]}\n")


def load_dataset(directory) -> Dataset:
    """Load a dataset directory, aligning everything to expression row order."""
    directory = Path(directory)
    expr_path = directory / "expression.csv"
    coords_path = directory / "coords.csv"
    if not expr_path.exists():
        raise MissingFile(str(expr_path))
    if not coords_path.exists():
        raise MissingFile(str(coords_path))
    barcodes, expression, gene_names = _load_expression(expr_path)
    coord_map = _load_keyed_floats(coords_path, 2, "coordinate")
    coords = np.empty((len(barcodes), 2))
    for i, bc in enumerate(barcodes):
        if bc not in coord_map:
            raise BarcodeMismatch(f"barcode {bc!r} present in expression.csv but missing from coords.csv")
        coords[i] = coord_map[bc]

    labels = None
    labels_path = directory / "labels.csv"
    if labels_path.exists():
        label_map = _load_labels(labels_path)
        labels = []
        for bc in barcodes:
            if bc not in label_map:
                raise BarcodeMismatch(f"barcode {bc!r} present in expression.csv but missing from labels.csv")
            labels.append(label_map[bc])

    image = None
    image_path = directory / "image.png"
    if image_path.exists():
        from PIL import Image
        image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)

    meta = {}
    scale_factor = 1.0
    meta_path = directory / "meta.cfg"
    if meta_path.exists():
        meta = read_meta(meta_path)
        if "scale_factor" in meta:
            scale_factor = float(meta["scale_factor"])

    embeddings = None
    emb_path = directory / "patch_embeddings.bin"
    if emb_path.exists():
        embeddings = read_embeddings(emb_path)
        if embeddings.shape[0] != len(barcodes):
            raise EmbeddingShapeMismatch(
                f"{emb_path}: {embeddings.shape[0]} rows but expression has {len(barcodes)} spots")

    return Dataset(barcodes=barcodes, expression=expression, gene_names=gene_names,
                   coords=coords, labels=labels, image=image, scale_factor=scale_factor,
                   patch_embeddings=embeddings, meta=meta)


def save_dataset(dataset: Dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "expression.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["barcode"] + list(dataset.gene_names))
        for bc, row in zip(dataset.barcodes, dataset.expression):
            writer.writerow([bc] + [int(v) for v in row])
    with open(directory / "coords.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["barcode", "x", "y"])
        for bc, (x, y) in zip(dataset.barcodes, dataset.coords):
            writer.writerow([bc, repr(float(x)), repr(float(y))])
    if dataset.labels is not None:
        with open(directory / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["barcode", "label"])
            for bc, lab in zip(dataset.barcodes, dataset.labels):
                writer.writerow([bc, lab])
    if dataset.image is not None:
        from PIL import Image
        Image.fromarray(dataset.image).save(directory / "image.png")
    meta = dict(dataset.meta)
    meta.setdefault("scale_factor", repr(float(dataset.scale_factor)))
    write_meta(directory / "meta.cfg", meta)
    if dataset.patch_embeddings is not None:
        write_embeddings(directory / "patch_embeddings.bin", dataset.patch_embeddings)


# ---------------------------------------------------------------------------
# Patch-embedding container (SPFE)
# ---------------------------------------------------------------------------

def write_embeddings(path, matrix: np.ndarray):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    n, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<III", EMBEDDING_VERSION, n, d))
        fh.write(matrix.tobytes())


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingEmbeddingFile(str(path))
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != EMBEDDING_MAGIC:
        raise MalformedRow(f"{path}: not a patch-embedding container")
    version, n, d = struct.unpack("<III", blob[4:16])
    if version != EMBEDDING_VERSION:
        raise MalformedRow(f"{path}: unsupported container version {version}")
    expected = 16 + 4 * n * d
    if len(blob) != expected:
        raise EmbeddingShapeMismatch(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(n, d).copy()


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessedMatrix:
    values: np.ndarray          # (n_kept, width) float64
    barcodes: list
    kept_spots: np.ndarray      # indices into the original dataset rows
    columns: list               # gene names, or pc0.. after projection
    manifest: list              # ordered [step, params] pairs; json-serializable


def filter_genes(expression: np.ndarray, min_cells: int = 50, min_total: int = 10) -> np.ndarray:
    """Indices of genes detected in >= min_cells spots with total count >= min_total."""
    detected = np.count_nonzero(expression > 0, axis=0)
    totals = expression.sum(axis=0)
    keep = np.flatnonzero((detected >= min_cells) & (totals >= min_total))
    if keep.size == 0:
        raise EmptyResult("gene filter removed every gene")
    return keep


def normalize_cpm(expression: np.ndarray, *, log1p: bool = True):
    """Counts-per-million row scaling, then log1p.

    Spots with zero total count cannot be scaled; they are dropped with a
    warning and reported through the second return value.

    :returns: (values (n_kept, g) float64, kept row indices)
    """
    totals = expression.sum(axis=1)
    kept = np.flatnonzero(totals > 0)
    if kept.size < totals.size:
        dropped = np.flatnonzero(totals == 0)
        log.warning("dropping %d spot(s) with zero total count: rows %s",
                    dropped.size, dropped.tolist())
    if kept.size == 0:
        raise EmptyResult("every spot has zero total count")
    values = expression[kept].astype(np.float64)
    values *= 1e6 / totals[kept, None]
    if log1p:
        values = np.log1p(values)
    return values, kept


def select_hvgs(values: np.ndarray, n_top: int = 2000, n_bins: int = 20) -> np.ndarray:
    """Top highly-variable genes by binned standardized variance.

    Genes are binned into ``n_bins`` equal-occupancy bins by mean expression;
    within each bin the variance is standardized, and genes rank by that score.
    Zero-variance genes always rank below any gene with positive variance.
    Returned indices preserve the original column order.
    """
    n, g = values.shape
    means = values.mean(axis=0)
    variances = values.var(axis=0)
    score = np.empty(g)
    order = np.argsort(means, kind="stable")
    bins = np.array_split(order, min(n_bins, g))
    for members in bins:
        if members.size == 0:
            continue
        v = variances[members]
        std = v.std()
        score[members] = (v - v.mean()) / std if std > 0 else 0.0
    score[variances == 0] = -np.inf
    # rank: standardized score desc, raw variance desc, index asc
    ranked = np.lexsort((np.arange(g), -variances, -score))
    keep = np.sort(ranked[: min(n_top, g)])
    return keep


def zscale(values: np.ndarray, clamp: float = 10.0) -> np.ndarray:
    """Per-column standardization with symmetric clamping; constant columns map to 0."""
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = (values - mu) / sd
    return np.clip(out, -clamp, clamp)


def preprocess(dataset: Dataset, *, min_cells: int = 50, min_total: int = 10,
               n_hvg: int = 2000, pca_components: int = 200, log1p: bool = True,
               do_zscale: bool = True, zscale_clamp: float = 10.0) -> PreprocessedMatrix:
    """Standard expression pipeline: gene filter, CPM+log1p, HVG selection,
    optional per-gene z-scaling, optional PCA projection.

    The returned manifest replays to a bit-identical matrix on the same data
    (see :func:`apply_manifest`).
    """
    manifest = [
        ["filter_genes", {"min_cells": min_cells, "min_total": min_total}],
        ["normalize_cpm", {"log1p": log1p}],
        ["select_hvgs", {"n_top": n_hvg}],
    ]
    if do_zscale:
        manifest.append(["zscale", {"clamp": zscale_clamp}])
    if pca_components:
        manifest.append(["pca", {"components": pca_components}])
    return apply_manifest(dataset, manifest)


def apply_manifest(dataset: Dataset, manifest: list) -> PreprocessedMatrix:
    """Replay a preprocessing manifest against raw data."""
    values = dataset.expression
    kept_spots = np.arange(dataset.n_spots)
    columns = list(dataset.gene_names)
    for step, params in manifest:
        if step == "filter_genes":
            keep = filter_genes(values, **params)
            values = values[:, keep]
            columns = [columns[i] for i in keep]
        elif step == "normalize_cpm":
            values, kept = normalize_cpm(values, **params)
            kept_spots = kept_spots[kept]
        elif step == "select_hvgs":
            keep = select_hvgs(values, **params)
            values = values[:, keep]
            columns = [columns[i] for i in keep]
        elif step == "zscale":
            values = zscale(values, **params)
        elif step == "pca":
            k = min(int(params["components"]), values.shape[0], values.shape[1])
            values = pca_fit_transform(values, k)
            columns = [f"pc{i}" for i in range(k)]
        else:
            raise DimensionMismatch(f"unknown preprocessing step {step!r}")
    require_finite(values, "preprocessed matrix")
    barcodes = [dataset.barcodes[i] for i in kept_spots]
    return PreprocessedMatrix(values=values, barcodes=barcodes, kept_spots=kept_spots,
                              columns=columns, manifest=manifest)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    grid_rows: int = 16
    grid_cols: int = 16
    n_domains: int = 4
    n_genes: int = 80
    markers_per_domain: int = 6
    noise: float = 0.5
    with_image: bool = True
    pitch: float = 64.0     # one 64px patch covers exactly one spot disk


# mid-dark, well separated; all below the foreground luminance threshold
DOMAIN_COLORS = np.array([
    (178, 66, 66), (66, 140, 74), (74, 86, 178), (170, 150, 52),
    (150, 72, 160), (60, 150, 150), (180, 110, 50), (110, 110, 110),
], dtype=np.float64)


def _hex_grid(spec: SyntheticSpec):
    margin = 4.0 * spec.pitch
    xs, ys = [], []
    for r in range(spec.grid_rows):
        for c in range(spec.grid_cols):
            xs.append(margin + (c + 0.5 * (r % 2)) * spec.pitch)
            ys.append(margin + r * spec.pitch * math.sqrt(3.0) / 2.0)
    return np.column_stack([xs, ys])


def _voronoi_domains(coords: np.ndarray, k: int, rng: SeededRng):
    """Contiguous, compact, near-equal-sized domains.

    Recursive balanced bisection: each region splits perpendicular to its
    long axis at a size-proportional quantile, jittered by the rng and
    quantized to the gaps between distinct coordinate values so boundaries
    run between full grid lines.  Compact convex blocks keep the synthetic
    task difficulty stable across seeds.
    """
    n = coords.shape[0]
    if k > n:
        raise EmptyResult(f"{k} domains requested for {n} spots")
    labels = np.zeros(n, dtype=np.int64)
    queue = [(np.arange(n), k, "r")]
    next_label = 0
    while queue:
        idx, kk, path = queue.pop(0)
        if kk == 1:
            labels[idx] = next_label
            next_label += 1
            continue
        pts = coords[idx]
        span = pts.max(axis=0) - pts.min(axis=0)
        axis = 1 if span[1] >= 0.55 * span[0] else 0
        vals = pts[:, axis]
        if axis == 0:
            # undo the row stagger before thresholding so vertical cuts
            # follow lattice edges instead of slicing interlocked spots
            rows, inv = np.unique(pts[:, 1], return_inverse=True)
            rowmin = np.array([vals[inv == i].min() for i in range(rows.size)])
            vals = vals - (rowmin[inv] - rowmin.min())
        edges = np.unique(vals)
        if edges.size < 2:
            axis = 1 - axis
            vals = pts[:, axis]
            edges = np.unique(vals)
        k1 = kk // 2
        k2 = kk - k1
        # gap index near the size-proportional quantile; sibling cuts draw a
        # shared offset pair that never lets neighboring junctions align
        counts = np.cumsum([np.sum(vals == e) for e in edges[:-1]])
        target = idx.size * k1 / kk
        g = int(np.argmin(np.abs(counts - target)))
        if path.endswith(("l", "h")):
            flip = int(rng.split(f"cut-{path[:-1]}").integers(0, 2))
            offs = (flip, 1 - flip)
            g += offs[0] if path.endswith("l") else offs[1]
        g = int(np.clip(g, 0, edges.size - 2))
        cut = 0.5 * (edges[g] + edges[g + 1])
        low = idx[vals <= cut]
        high = idx[vals > cut]
        if low.size == 0 or high.size == 0:
            half = idx.size // 2
            order = idx[np.argsort(vals, kind="stable")]
            low, high = order[:half], order[half:]
        queue.append((low, k1, path + "l"))
        queue.append((high, k2, path + "h"))
    sites = np.stack([coords[labels == c].mean(axis=0) for c in range(k)])
    return labels, sites


def generate_synthetic(spec: SyntheticSpec, rng: SeededRng) -> Dataset:
    """Hexagonal-grid tissue with K contiguous Voronoi domains.

    Expression is Poisson with per-domain marker boosts; the noise level mixes
    in another domain's profile per spot (mixed-capture spots) and adds pixel
    noise to the image.  Domain identity is painted into the image as colored
    disks, so image features carry the domain signal independently of
    expression noise.
    """
    if spec.n_domains * spec.markers_per_domain > spec.n_genes:
        raise DimensionMismatch("markers_per_domain * n_domains exceeds n_genes")
    coords = _hex_grid(spec)
    n = coords.shape[0]
    domains, _ = _voronoi_domains(coords, spec.n_domains, rng.split("sites"))

    base, boost = 5.0, 35.0
    profiles = np.full((spec.n_domains, spec.n_genes), base)
    for k in range(spec.n_domains):
        lo = k * spec.markers_per_domain
        profiles[k, lo: lo + spec.markers_per_domain] += boost

    mix_rng = rng.split("mix")
    w = spec.noise * 0.8 * mix_rng.random(n)
    other = mix_rng.integers(0, spec.n_domains, size=n)
    other = np.where(other == domains, (other + 1) % spec.n_domains, other)
    rates = (1.0 - w)[:, None] * profiles[domains] + w[:, None] * profiles[other]
    counts = rng.split("counts").poisson(rates).astype(np.int64)

    barcodes = [f"spot{i:04d}" for i in range(n)]
    labels = [f"domain_{d}" for d in domains]

    image = None
    if spec.with_image:
        h = int(math.ceil(coords[:, 1].max() + 4.0 * spec.pitch))
        wpx = int(math.ceil(coords[:, 0].max() + 4.0 * spec.pitch))
        canvas = np.full((h, wpx, 3), 255.0)
        radius = 0.62 * spec.pitch
        yy, xx = np.mgrid[-int(radius): int(radius) + 1, -int(radius): int(radius) + 1]
        disk = (yy ** 2 + xx ** 2) <= radius ** 2
        for i in range(n):
            cx, cy = int(round(coords[i, 0])), int(round(coords[i, 1]))
            ys = slice(cy - int(radius), cy + int(radius) + 1)
            xs = slice(cx - int(radius), cx + int(radius) + 1)
            canvas[ys, xs][disk] = DOMAIN_COLORS[domains[i] % len(DOMAIN_COLORS)]
        noise_px = rng.split("pixels").normal(0.0, 20.0 * spec.noise, size=canvas.shape)
        image = np.clip(canvas + noise_px, 0, 255).astype(np.uint8)

    return Dataset(
        barcodes=barcodes,
        expression=counts,
        gene_names=[f"gene{j:03d}" for j in range(spec.n_genes)],
        coords=coords,
        labels=labels,
        image=image,
        scale_factor=1.0,
        meta={"scale_factor": "1.0", "generator": "synthetic"},
    )
