"""Flat ``key = value`` experiment configuration and shipped presets.

Lines are ``dotted.key = value``; ``#`` starts a comment; an empty value
means "unset".  Unknown keys are errors.  :func:`dump_config` writes every
key, so its output is a complete, closed description of a run.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

__all__ = ["ConfigError", "SCHEMA", "PRESETS", "TINY_SCALE", "parse_config", "load_config",
           "resolve", "dump_config", "preset"]


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _choice(*options):
    def conv(s: str) -> str:
        if s not in options:
            raise ConfigError(f"{s!r} is not one of {', '.join(options)}")
        return s
    return conv


_SCHEDULE = _choice("constant", "cosine_ramp_up", "cosine_ramp_down", "linear_ramp_up")

# key -> (converter, default); default None means unset
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    "output.dir": (str, "runs/default"),
    "dataset.source": (_choice("synthetic", "cifar10", "cifar100"), "synthetic"),
    "dataset.path": (str, None),
    "dataset.validation_fraction": (float, 0.01),
    "dataset.synthetic.classes": (int, 6),
    "dataset.synthetic.image_size": (int, 16),
    "dataset.synthetic.n_train": (int, 3000),
    "dataset.synthetic.n_test": (int, 600),
    "dataset.synthetic.clutter": (float, 0.0),
    "noise.kind": (_choice("none", "symmetric", "asymmetric", "semi_sl"), "none"),
    "noise.symmetric.eps": (float, None),
    "noise.symmetric.includes_self": (_bool, False),
    "noise.asymmetric.eps": (float, None),
    "noise.asymmetric.pairing": (str, "next"),
    "noise.semi_sl.labels": (int, None),
    "model.width": (float, 1.0),
    "model.norm": (_choice("batch", "instance", "layer", "group", "group_ws"), "group_ws"),
    "model.group_size": (int, 16),
    "model.dropout": (float, 0.5),
    "train.consistency": (_choice("mse", "kl"), "mse"),
    "train.rotation": (_bool, True),
    "train.epochs": (int, 180),
    "train.batch_size": (int, 64),
    "train.labeled_batch_size": (int, 16),
    "train.lr": (float, 0.05),
    "train.lr_floor": (float, 0.0),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 2e-4),
    "train.clip_threshold": (float, 3.0),
    "train.ema_decay": (float, 0.99),
    "train.ema_decay_late": (float, 0.999),
    "train.swa.cycles": (int, 0),
    "train.swa.cycle_length": (int, 30),
    "train.swa.pretrain_epochs": (int, None),
    "train.swa.captures_per_cycle": (int, 1),
    "train.augment.shift": (int, 2),
    "train.augment.flip": (_bool, True),
    "train.input_noise": (float, 0.15),
    "weights.s.kind": (_SCHEDULE, "constant"),
    "weights.s.start": (float, 1.0),
    "weights.s.end": (float, None),
    "weights.s.length": (float, 1.0),
    "weights.c.kind": (_SCHEDULE, "cosine_ramp_up"),
    "weights.c.start": (float, 0.0),
    "weights.c.end": (float, 100.0),
    "weights.c.length": (float, 54.0),
    "weights.r.kind": (_SCHEDULE, "constant"),
    "weights.r.start": (float, 0.0),
    "weights.r.end": (float, None),
    "weights.r.length": (float, 1.0),
}


def _convert(key: str, raw: Optional[str]):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    if raw is None:
        return None
    raw = raw.strip()
    if raw == "":
        return None
    try:
        return SCHEMA[key][0](raw)
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str) -> dict[str, Any]:
    """Parse config text into a dict of explicitly set keys (no defaults)."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = _convert(key, value)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --------------------------------------------------------------------------
# presets

def _nl_preset(eps: float, w_r: tuple[float, float], kind: str = "symmetric") -> dict:
    return {
        "dataset.source": "cifar10",
        "noise.kind": kind,
        f"noise.{kind}.eps": eps,
        "train.epochs": 360,
        "train.swa.cycles": 6,
        "train.swa.cycle_length": 30,
        "train.swa.pretrain_epochs": 180,
        "weights.s.kind": "cosine_ramp_down", "weights.s.start": 1.0, "weights.s.end": 0.0,
        "weights.s.length": 180.0,
        "weights.c.kind": "cosine_ramp_up", "weights.c.start": 0.0, "weights.c.end": 100.0,
        "weights.c.length": 54.0,
        "weights.r.kind": "linear_ramp_up", "weights.r.start": w_r[0], "weights.r.end": w_r[1],
        "weights.r.length": 180.0,
    }


def _semi_preset(labels: int, cifar: str, w_r: float) -> dict:
    return {
        "dataset.source": cifar,
        "noise.kind": "semi_sl",
        "noise.semi_sl.labels": labels,
        "train.epochs": 780,
        "train.swa.cycles": 20,
        "train.swa.cycle_length": 30,
        "train.swa.pretrain_epochs": 180,
        "weights.s.kind": "constant", "weights.s.start": 1.0,
        "weights.c.kind": "cosine_ramp_up", "weights.c.start": 0.0, "weights.c.end": 100.0,
        "weights.c.length": 54.0,
        "weights.r.kind": "constant", "weights.r.start": w_r,
    }


PRESETS: dict[str, dict] = {
    "sym20": _nl_preset(0.2, (0.0, 0.3)),
    "sym50": _nl_preset(0.5, (0.0, 0.3)),
    "sym80": _nl_preset(0.8, (0.3, 0.5)),
    "asym40": _nl_preset(0.4, (0.0, 0.3), "asymmetric"),
    "semi1k": _semi_preset(1000, "cifar10", 10.0),
    "semi2k": _semi_preset(2000, "cifar10", 10.0),
    "semi4k": _semi_preset(4000, "cifar10", 10.0),
    "semi10k": _semi_preset(10000, "cifar100", 1.0),
}

# Desk-scale override: ShapeSet, tiny width, 60 epochs, no fast-SWA phase.
# Schedule lengths are rescaled by epochs_tiny / epochs_full.
TINY_SCALE = {
    "dataset.source": "synthetic",
    "dataset.synthetic.classes": 6,
    "dataset.synthetic.image_size": 8,
    "dataset.synthetic.n_train": 3000,
    "dataset.synthetic.n_test": 600,
    "model.width": 0.125,
    "model.dropout": 0.0,
    "weights.c.end": 10.0,
    "train.epochs": 60,
    "train.swa.cycles": 0,
    "train.swa.pretrain_epochs": None,
}
TINY_SEMI_LABELS = {1000: 120, 2000: 240, 4000: 480, 10000: 1200}
TINY_SEMI_MAX_W_R = 1.0


def preset(name: str, scale: Optional[str] = None) -> dict[str, Any]:
    """Explicit key overrides of a shipped preset (optionally desk-scaled)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    cfg = dict(PRESETS[name])
    if scale is None:
        return cfg
    if scale != "tiny":
        raise ConfigError(f"unknown scale {scale!r}")
    full_len = cfg["train.swa.pretrain_epochs"] or cfg["train.epochs"]
    cfg.update(TINY_SCALE)
    ratio = TINY_SCALE["train.epochs"] / full_len
    for w in "scr":
        key = f"weights.{w}.length"
        if key in cfg:
            cfg[key] = cfg[key] * ratio
    if cfg["noise.kind"] == "semi_sl":
        cfg["noise.semi_sl.labels"] = TINY_SEMI_LABELS[cfg["noise.semi_sl.labels"]]
        # a w_R of 10 swamps the classifier at width 0.125
        cfg["weights.r.start"] = min(cfg["weights.r.start"], TINY_SEMI_MAX_W_R)
    return cfg


def resolve(overrides: dict[str, Any]) -> dict[str, Any]:
    """Fill defaults and validate cross-key constraints."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for k, v in overrides.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = v
    kind = cfg["noise.kind"]
    required = {"symmetric": "noise.symmetric.eps", "asymmetric": "noise.asymmetric.eps",
                "semi_sl": "noise.semi_sl.labels"}
    for k, key in required.items():
        if k == kind and cfg[key] is None:
            raise ConfigError(f"noise.kind = {kind} needs {key}")
        if k != kind and cfg[key] is not None:
            raise ConfigError(f"{key} is set but noise.kind = {kind}; exactly one noise spec is allowed")
    return cfg


def load_config(path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in SCHEMA)
