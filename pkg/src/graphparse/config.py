"""Flat ``key=value`` run configuration.

Every trainer, backbone, model and scene knob has a dotted key
(``train.base_lr``, ``backbone.widths``, ``model.transfers`` ...).  Values
are resolved as file < ``GRAPHONOMY_SEED`` (seed only) < ``--key=value``
flags; unknown keys are rejected.  Tuples are written comma-separated and
transfer edges as ``src->tgt``.
"""
from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

from .errors import ConfigError
from .model import ModelConfig
from .segnet import BackboneConfig
from .synthdata import SceneConfig
from .trainer import TrainConfig

SEED_ENV = "GRAPHONOMY_SEED"

# keys owned by the run itself rather than a config dataclass
_RUN_KEYS: Dict[str, object] = {
    "seed": 0,
    "data.train": (),            # manifest paths
    "data.test": (),
    "data.fraction": 1.0,        # fraction of each training manifest used
    "data.embeddings": "",       # word-embedding file; empty = shipped table
    "data.taxonomy": "",         # taxonomy file; empty = shipped taxonomy
    "init.checkpoint": "",       # start from these weights
    "out.dir": "run",
    "eval.exclude_background": False,
    "eval.f1_foreground_only": True,
}

_SECTIONS = (("train", TrainConfig, ("seed",)),
             ("backbone", BackboneConfig, ()),
             ("model", ModelConfig, ("seed", "backbone")),
             ("scene", SceneConfig, ()))


def _defaults() -> Dict[str, object]:
    out = dict(_RUN_KEYS)
    for prefix, cls, skip in _SECTIONS:
        for f in dataclasses.fields(cls):
            if f.name not in skip:
                out[f"{prefix}.{f.name}"] = getattr(cls(), f.name)
    return out


DEFAULTS = _defaults()


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of ``key``'s default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key == "model.transfers":
                edges = []
                for item in items:
                    if "->" not in item:
                        raise ConfigError(f"{key}: edge {item!r} must look like src->tgt")
                    a, b = item.split("->", 1)
                    edges.append((a.strip(), b.strip()))
                return tuple(edges)
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(f"{v[0]}->{v[1]}" if isinstance(v, tuple) else str(v) for v in value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> Dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = parse_value(key, value)
    return out


def parse_flags(flags: Iterable[str]) -> Dict[str, object]:
    out = {}
    for flag in flags:
        if not flag.startswith("--") or "=" not in flag:
            raise ConfigError(f"override {flag!r} must look like --key=value")
        key, value = flag[2:].split("=", 1)
        out[key] = parse_value(key, value)
    return out


class RunConfig:
    """Resolved settings; ``values`` maps every known key to a typed value."""

    def __init__(self, values: Optional[Mapping[str, object]] = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    @classmethod
    def resolve(cls, path=None, flags: Iterable[str] = (),
                env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        env = os.environ if env is None else env
        merged: Dict[str, object] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            merged.update(parse_text(p.read_text("utf-8"), str(p)))
        if env.get(SEED_ENV, "").strip():
            merged["seed"] = parse_value("seed", env[SEED_ENV])
        merged.update(parse_flags(flags))
        return cls(merged)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str) -> Dict[str, object]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(seed=self["seed"], **self.section("train"))
        cfg.validate()
        return cfg

    def backbone_config(self) -> BackboneConfig:
        cfg = BackboneConfig(**self.section("backbone"))
        cfg.validate()
        return cfg

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(backbone=self.backbone_config(), seed=self["seed"],
                          **self.section("model"))
        cfg.validate()
        return cfg

    def scene_config(self) -> SceneConfig:
        cfg = SceneConfig(**self.section("scene"))
        cfg.validate()
        return cfg

    def lines(self) -> List[str]:
        return [f"{k}={format_value(v)}" for k, v in sorted(self.values.items())]

    def dump(self) -> str:
        return "\n".join(self.lines()) + "\n"
