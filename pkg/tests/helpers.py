"""Shared test utilities: small dense instances and flat-vector wrappers
around the dict-of-tensors objectives so they can be finite-difference
checked."""

import numpy as np

from spotfusion.rng import SeededRng
from spotfusion.spatial_graph import build_knn_graph


def grid_coords(rows: int, cols: int, pitch: float = 1.0) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(cols, dtype=np.float64),
                         np.arange(rows, dtype=np.float64))
    return np.column_stack([xs.ravel(), ys.ravel()]) * pitch


def tiny_instance(rows: int = 5, cols: int = 6, n_genes: int = 20,
                  seed: int = 11, k: int = 4):
    """A 30-spot, 20-gene expression block on a small grid graph."""
    coords = grid_coords(rows, cols)
    x = SeededRng(seed).normal(0.0, 1.0, size=(rows * cols, n_genes))
    return coords, x, build_knn_graph(coords, k)


def make_flat_objective(tensors: dict, keys, eval_fn):
    """Expose ``eval_fn`` over a dict of tensors as a flat-vector objective.

    ``eval_fn(t)`` must return (loss, grads-dict); entries of ``tensors`` not
    listed in ``keys`` are held fixed.  Returns (fn, x0, names) where fn maps
    a flat vector to (loss, flat gradient) and names is the (key, size) list
    gradient_check expects.
    """
    keys = list(keys)
    shapes = {k: np.asarray(tensors[k]).shape for k in keys}
    sizes = [int(np.asarray(tensors[k]).size) for k in keys]

    def fn(flat):
        t = dict(tensors)
        off = 0
        for k, sz in zip(keys, sizes):
            t[k] = np.asarray(flat[off:off + sz], dtype=np.float64).reshape(shapes[k])
            off += sz
        loss, grads = eval_fn(t)
        g = np.concatenate([np.asarray(grads[k], dtype=np.float64).ravel()
                            for k in keys])
        return float(loss), g

    x0 = np.concatenate([np.asarray(tensors[k], dtype=np.float64).ravel()
                         for k in keys])
    return fn, x0, list(zip(keys, sizes))
