"""Run configuration: one flat record holding every pipeline hyperparameter.

Serialized as key=value lines (one per line, # comments allowed).  Unknown
keys are rejected so typos fail loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    data: str = ""
    out: str = ""
    seed: int = 7
    clusters: int = 4

    # preprocessing
    hvg: int = 2000
    pca_components: int = 200
    zscale: bool = True

    # spatial graph
    graph_k: int = 6

    # encoder / generator widths
    enc_d1: int = 64
    enc_hidden: int = 48
    enc_d2: int = 32
    noise_dim: int = 32
    gan_hidden: int = 64

    # stage 1
    stage1_epochs: int = 400
    stage1_lr: float = 1e-3
    mask_ratio: float = 0.8
    mask_alpha: float = 3.0
    lambda_rec: float = 1.0
    lambda_graph: float = 0.3
    lambda_mask: float = 1.0
    lambda_gan: float = 0.1
    lambda_kl: float = 0.1

    # stage 2
    stage2_epochs: int = 200
    stage2_lr: float = 1e-3
    refresh_interval: int = 20
    stop_delta: float = 0.001
    dec_alpha: float = 1.0
    lambda_dec: float = 1.0

    # image branch
    use_image: bool = True
    image_encoder: str = "toy"          # "toy" or "precomputed"
    stain_clusters: int = 8
    smooth_k: int = 6
    smooth_lambda: float = 0.3

    # stage 3
    stage3_epochs: int = 200
    stage3_lr: float = 1e-3
    fusion_dim: int = 64
    fusion_heads: int = 4
    alpha: float = 0.7
    tau: float = 0.12
    direction: str = "image_to_gene"
    lambda_sdm: float = 1.0
    lambda_con: float = 1.0
    lambda_reg: float = 0.01
    unfreeze_encoder: bool = False

    # refinement
    anchor_fraction: float = 0.01
    diffusion_max_iter: int = 50
    diffusion_tol: float = 1e-6


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        if kind == "bool" or kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """key=value lines -> {field: typed value}; unknown keys raise ConfigError."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path) -> "RunConfig":
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig(**parse_config_text(fh.read()))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New config with the given field values replacing the current ones."""
    unknown = [k for k in overrides if k not in _FIELDS]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return dataclasses.replace(cfg, **overrides)
