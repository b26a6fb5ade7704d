"""Run configuration files.

Grammar: UTF-8 text, ``[section]`` headers, ``key = value`` lines, ``#``
comments.  Sections and keys::

    [run]      seed, out, dtype (f32|f64)
    [model]    image_size, patch_size, in_chans, embed_dim, depth, heads,
               mlp_ratio, num_classes, ln_eps
    [data]     train, test (ELTD paths) or synthetic: classes, per_class,
               image_size, noise, seed, holdout
    [train]    lr, min_lr, beta1, beta2, weight_decay, epochs,
               warmup_epochs, batch_size
    [dilute]   schedule (linear|cosine), decay_steps, granularity
               (epoch|iteration), compensation (true|false), lr, min_lr,
               epochs, batch_size
    [select]   method (nose|random|first_n), n, ratio, probe_size, target
               (last_block|logits)

Unknown sections or keys, unparsable values, and out-of-range values raise
``ConfigError`` naming the offending key.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(*opts: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in opts:
            raise ValueError(f"expected one of {opts}, got {s!r}")
        return s
    return parse


def _pos_int(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise ValueError(f"must be > 0, got {v}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise ValueError(f"must be > 0, got {v}")
    return v


def _ratio(s: str) -> float:
    v = float(s)
    if not 0 < v <= 1:
        raise ValueError(f"must lie in (0, 1], got {v}")
    return v


def _unit(s: str) -> float:
    v = float(s)
    if not 0 <= v < 1:
        raise ValueError(f"must lie in [0, 1), got {v}")
    return v


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "run": {"seed": _nonneg_int, "out": str, "dtype": _choice("f32", "f64")},
    "model": {"image_size": _pos_int, "patch_size": _pos_int, "in_chans": _pos_int,
              "embed_dim": _pos_int, "depth": _pos_int, "heads": _pos_int,
              "mlp_ratio": _pos_float, "num_classes": _pos_int, "ln_eps": _pos_float},
    "data": {"train": str, "test": str, "classes": _pos_int, "per_class": _pos_int,
             "image_size": _pos_int, "noise": float, "seed": _nonneg_int, "holdout": _unit},
    "train": {"lr": _pos_float, "min_lr": float, "beta1": _unit, "beta2": _unit,
              "weight_decay": float, "epochs": _pos_int, "warmup_epochs": _nonneg_int,
              "batch_size": _pos_int},
    "dilute": {"schedule": _choice("linear", "cosine"), "decay_steps": _nonneg_int,
               "granularity": _choice("epoch", "iteration"), "compensation": _bool,
               "lr": _pos_float, "min_lr": float, "epochs": _pos_int, "batch_size": _pos_int},
    "select": {"method": _choice("nose", "random", "first_n"), "n": _nonneg_int,
               "ratio": _ratio, "probe_size": _pos_int,
               "target": _choice("last_block", "logits")},
}

# keys that must appear whenever their section does
REQUIRED: dict[str, tuple[str, ...]] = {"select": ("method",), "dilute": ("schedule",)}


@dataclass
class RunConfig:
    sections: dict[str, dict[str, Any]] = field(default_factory=lambda: {s: {} for s in SCHEMA})
    source: Path | None = None

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def section(self, name: str) -> dict[str, Any]:
        return self.sections.setdefault(name, {})


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(source or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = RunConfig(source=source)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            try:
                cfg.sections[sec][key] = SCHEMA[sec][key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {exc}") from exc
    for sec, keys in REQUIRED.items():
        if not cp.has_section(sec):
            continue
        for key in keys:
            if key not in cfg.sections.get(sec, {}):
                raise ConfigError(f"missing required key {sec}.{key}")
    base = source.parent if source else Path.cwd()
    for key in ("train", "test"):
        if key in cfg.sections["data"]:
            p = Path(cfg.sections["data"][key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ConfigError(f"data.{key}: file not found: {p}")
            cfg.sections["data"][key] = str(p)
    if "n" in cfg.sections["select"] and "ratio" in cfg.sections["select"]:
        raise ConfigError("select.n and select.ratio are mutually exclusive")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path)
