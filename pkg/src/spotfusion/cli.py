"""Command-line entry point.

The thread cap (SPF_THREADS, default 1 for reproducible BLAS reductions) must
be in the environment before numpy first loads, so this module imports only
the standard library at module scope and defers the implementation imports to
dispatch time.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import RunConfig
from .errors import ConfigError, DataError, NumericalError, SpotFusionError

log = logging.getLogger("spotfusion")

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def apply_thread_cap() -> None:
    threads = os.environ.get("SPF_THREADS", "1")
    for var in _BLAS_VARS:
        os.environ.setdefault(var, threads)


def _add_config_flags(sp: argparse.ArgumentParser) -> None:
    """One flag per config key; absent flags leave the config file value."""
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            sp.add_argument(flag, dest=f.name, default=None,
                            action=argparse.BooleanOptionalAction)
        elif kind == "int":
            sp.add_argument(flag, dest=f.name, type=int, default=None)
        elif kind == "float":
            sp.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            sp.add_argument(flag, dest=f.name, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotfusion",
        description="Spatial multi-omics clustering from expression, location, and stain image.")
    parser.add_argument("-q", "--quiet", action="store_true",
                        help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("preprocess", "filter, normalize, select genes, and project expression"),
        ("train", "fit all model stages and save a checkpoint"),
        ("cluster", "mixture clustering plus anchored label diffusion on an embedding file"),
        ("run", "full pipeline: preprocess through refined labels and metrics"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=str, default=None,
                        help="key=value config file; flags override it")
        _add_config_flags(sp)
        if name == "cluster":
            sp.add_argument("--embeddings", type=str, required=True,
                            help="embedding container whose rows match the dataset spots")

    sp = sub.add_parser("evaluate", help="compare predicted labels against ground truth")
    sp.add_argument("--pred", type=str, required=True, help="predicted labels.csv")
    sp.add_argument("--truth", type=str, required=True, help="ground-truth labels.csv")
    sp.add_argument("--out", type=str, default=None, help="optional metrics.json path")

    sp = sub.add_parser("synth", help="write a synthetic dataset directory")
    sp.add_argument("--out", type=str, required=True)
    sp.add_argument("--grid-rows", type=int, default=16)
    sp.add_argument("--grid-cols", type=int, default=16)
    sp.add_argument("--domains", type=int, default=4)
    sp.add_argument("--genes", type=int, default=80)
    sp.add_argument("--markers", type=int, default=6)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--pitch", type=float, default=64.0)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--image", dest="image", default=True,
                    action=argparse.BooleanOptionalAction)
    return parser


def _merged_config(args) -> RunConfig:
    from .config import apply_overrides, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items()
                 if k in names and v is not None}
    return apply_overrides(cfg, overrides)


def _require(cfg: RunConfig, *names):
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"missing required option --{name}")


def _cmd_preprocess(args) -> int:
    from .dataio import load_dataset, preprocess, write_embeddings

    cfg = _merged_config(args)
    _require(cfg, "data", "out")
    os.makedirs(cfg.out, exist_ok=True)
    dataset = load_dataset(cfg.data)
    pre = preprocess(dataset, n_hvg=cfg.hvg, pca_components=cfg.pca_components,
                     do_zscale=cfg.zscale)
    write_embeddings(os.path.join(cfg.out, "preprocessed.bin"), pre.values)
    with open(os.path.join(cfg.out, "preprocess_manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"steps": pre.manifest, "barcodes": pre.barcodes,
                   "columns": pre.columns}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s (%d x %d)", os.path.join(cfg.out, "preprocessed.bin"),
             pre.values.shape[0], pre.values.shape[1])
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import save_tensors
    from .pipeline import train_models

    cfg = _merged_config(args)
    _require(cfg, "data", "out")
    models = train_models(cfg)
    r2 = models.stage2
    tensors = dict(r2.encoder.tensors)
    tensors.update({f"running.{k}": v for k, v in r2.encoder.running.items()})
    tensors.update(r2.gan.tensors)
    tensors["centroids"] = r2.assignment.centroids
    if models.stage3 is not None:
        tensors.update(models.stage3.params.tensors)
    path = os.path.join(cfg.out, "model.bin")
    save_tensors(path, tensors)
    log.info("wrote %s", path)
    return 0


def _cmd_cluster(args) -> int:
    import numpy as np

    from .clustering import gmm_cluster, refine_labels
    from .dataio import load_dataset, read_embeddings
    from .errors import EmbeddingShapeMismatch
    from .pipeline import write_labels_csv, write_svg_scatter
    from .rng import SeededRng
    from .spatial_graph import build_gaussian_kernel

    cfg = _merged_config(args)
    _require(cfg, "data", "out")
    dataset = load_dataset(cfg.data)
    embedding = np.asarray(read_embeddings(args.embeddings), dtype=np.float64)
    if embedding.shape[0] != dataset.n_spots:
        raise EmbeddingShapeMismatch(
            f"{args.embeddings}: {embedding.shape[0]} rows for {dataset.n_spots} spots")
    rng = SeededRng(cfg.seed)
    hard, _, _ = gmm_cluster(embedding, cfg.clusters, rng.split("gmm"))
    kernel = build_gaussian_kernel(dataset.coords, cfg.graph_k)
    refined, _ = refine_labels(hard, cfg.clusters, kernel,
                               fraction=cfg.anchor_fraction,
                               max_iter=cfg.diffusion_max_iter,
                               tol=cfg.diffusion_tol)
    os.makedirs(cfg.out, exist_ok=True)
    write_labels_csv(os.path.join(cfg.out, "labels.csv"), dataset.barcodes, refined)
    write_svg_scatter(os.path.join(cfg.out, "clusters.svg"), dataset.coords, refined)
    log.info("wrote %s", os.path.join(cfg.out, "labels.csv"))
    return 0


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = _merged_config(args)
    _require(cfg, "data", "out")
    result = run_pipeline(cfg)
    if result.report is not None:
        r = result.report
        print(f"ari={r.ari:.4f} ami={r.ami:.4f} completeness={r.completeness:.4f}")
    print(f"labels: {result.out_dir / 'labels.csv'}")
    return 0


def _cmd_evaluate(args) -> int:
    import numpy as np

    from .dataio import load_labels_csv
    from .errors import BarcodeMismatch
    from .metrics import evaluate_labels

    pred = load_labels_csv(args.pred)
    truth = load_labels_csv(args.truth)
    if set(pred) != set(truth):
        missing = sorted(set(truth) ^ set(pred))[:3]
        raise BarcodeMismatch(f"label files cover different spots (e.g. {missing})")
    order = sorted(pred)
    report = evaluate_labels(np.array([pred[b] for b in order]),
                             np.array([truth[b] for b in order]))
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(payload)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    return 0


def _cmd_synth(args) -> int:
    from .dataio import SyntheticSpec, generate_synthetic, save_dataset
    from .rng import SeededRng

    spec = SyntheticSpec(grid_rows=args.grid_rows, grid_cols=args.grid_cols,
                         n_domains=args.domains, n_genes=args.genes,
                         markers_per_domain=args.markers, noise=args.noise,
                         with_image=args.image, pitch=args.pitch)
    dataset = generate_synthetic(spec, SeededRng(args.seed))
    save_dataset(dataset, args.out)
    log.info("wrote synthetic dataset to %s (%d spots)", args.out, dataset.n_spots)
    return 0


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "cluster": _cmd_cluster,
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    apply_thread_cap()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except SpotFusionError as exc:   # base-class fallback, treated as data
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
