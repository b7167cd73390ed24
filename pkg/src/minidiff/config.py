"""Flat key=value run configuration with namespaced keys.

Every key has a documented default; unknown keys fail loudly. The tuned
values from the source protocol are the defaults where one was stated
(adaptation iterations/batch/learning rates, classifier batch/lr, the
guidance/strength sweep, 8:1:1 splits, 1000-image expansion).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError

# default, parser
DEFAULTS: dict[str, tuple] = {
    "seed": (0, int),

    "schedule.T": (1000, int),
    "schedule.kind": ("linear-beta", str),

    "model.image_size": (32, int),
    "model.latent_mode": ("autoencoder", str),
    "model.spatial_factor": (2, int),
    "model.latent_channels": (2, int),
    "model.ae_width": (16, int),
    "model.denoiser_width": (32, int),
    "model.denoiser_blocks": (3, int),
    "model.embed_dim": (16, int),
    "model.text_blocks": (1, int),
    "model.placeholder_width": (1, int),

    "pretrain.ae_iterations": (600, int),
    "pretrain.ae_lr": (2e-3, float),
    "pretrain.iterations": (3000, int),
    "pretrain.batch": (8, int),
    "pretrain.lr": (2e-3, float),
    "pretrain.null_prob": (0.1, float),

    "adapt.prompt": ("a photo of <unknown>", str),
    "adapt.trainable_word": ("", str),
    "adapt.iterations": (1000, int),
    "adapt.batch": (4, int),
    "adapt.lr.token": (5e-4, float),
    "adapt.lr.lora": (1e-4, float),
    "adapt.rank": (1, int),
    "adapt.null_prob": (0.1, float),

    "gen.n": (1000, int),
    "gen.omega_cfg": (3.0, float),
    "gen.strength": (0.5, float),
    "gen.mode": ("stochastic-paper", str),
    "gen.image_oriented": (True, bool),
    "gen.batch": (32, int),

    "tune.grid": ("omega=3,4,5,6,7 strength=0.3,0.4,0.5,0.6,0.7", str),
    "tune.n_per_cell": (64, int),
    "tune.variance_probes": (0, int),
    "tune.strategy": ("grid", str),      # grid | coordinate-descent

    "fid.extractor": ("trained-probe-net", str),

    "data.root": ("", str),
    "data.ratio": ("8,1,1", str),
    "data.synth_classes": ("scratch,pit,patch,scale", str),
    "data.synth_n": (64, int),
    "data.alpha": (1.0, float),

    "classify.alpha": (1.0, float),
    "classify.substitute": (False, bool),
    "classify.expand_n": (0, int),
    "classify.epochs": (20, int),
    "classify.batch": (32, int),
    "classify.lr": (1e-4, float),
    "classify.patience": (5, int),
    "classify.channels": (1, int),

    "pipeline.token": (True, bool),
    "pipeline.lora": (True, bool),
    "pipeline.full_param": (False, bool),
    "pipeline.image_oriented": (True, bool),
    "pipeline.tune": (False, bool),
    "pipeline.classify": (True, bool),
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def default_config() -> dict:
    return {key: default for key, (default, _) in DEFAULTS.items()}


def parse_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    """Load a key=value config file onto the defaults table.

    Lines are `namespaced.key = value`; '#' starts a comment. Unknown keys or
    unparsable values raise ConfigError naming every offender.
    """
    cfg = default_config()
    problems: list[str] = []
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected key = value, got {line!r}")
                continue
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                problems.append(f"line {lineno}: unknown key {key!r}")
                continue
            parser = DEFAULTS[key][1]
            try:
                cfg[key] = _parse_bool(raw) if parser is bool else parser(raw)
            except ValueError as exc:
                problems.append(f"line {lineno}: bad value for {key}: {exc}")
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            problems.append(f"override: unknown key {key!r}")
        else:
            cfg[key] = value
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def parse_grid(spec: str) -> list[tuple[float, float]]:
    """Parse "omega=3,4 strength=0.3,0.4" into the (omega, strength) product."""
    omegas: list[float] = []
    strengths: list[float] = []
    for token in spec.split():
        if "=" not in token:
            raise ConfigError(f"bad grid token {token!r}")
        name, vals = token.split("=", 1)
        try:
            values = [float(x) for x in vals.split(",") if x]
        except ValueError as exc:
            raise ConfigError(f"bad grid values in {token!r}: {exc}") from exc
        if name in ("omega", "omega_cfg"):
            omegas = values
        elif name in ("s", "strength"):
            strengths = values
        else:
            raise ConfigError(f"unknown grid axis {name!r}")
    if not omegas or not strengths:
        raise ConfigError(f"grid needs both omega and strength axes: {spec!r}")
    return [(w, s) for s in strengths for w in omegas]


def parse_ratio(spec: str) -> tuple[float, float, float]:
    parts = [float(x) for x in spec.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"split ratio needs 3 numbers, got {spec!r}")
    return tuple(parts)  # type: ignore[return-value]


def config_hash(cfg: dict) -> str:
    canon = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
