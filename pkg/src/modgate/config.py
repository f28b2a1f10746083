"""Run configuration: defaults, YAML file, MODGATE_ env vars, flag overrides.

Precedence is flags > env > file > defaults. Validation collects every
violation before raising, so a bad config fails once with the full list.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

ENV_PREFIX = "MODGATE_"


def _default_routing() -> dict:
    return {
        "apparel": ["logo_brandx"],
        "toys": ["logo_brandx", "skin"],
        "jewelry": ["logo_brandx"],
    }


def _default_detectors() -> dict:
    return {
        "logo_brandx": {"kind": "template", "class": "brandx",
                        "params": {"scales": [0.25, 0.5], "resample": "nearest"}},
        "skin": {"kind": "skin", "class": "nudity"},
    }


@dataclass(frozen=True)
class RunConfig:
    # paths
    workdir: str = "work"
    catalog_dir: str = "work/catalog"
    logos_dir: str = "work/logos"
    dataset_dir: str = "work/dataset"
    index_path: str = "work/index.bin"
    thresholds_path: str = "work/index_thresholds.json"
    models_dir: str = "work/models"
    eval_dir: str = "work/eval"
    static_dir: str = ""          # review console build; empty disables
    # seed
    seed: int = 0
    # corpus generation
    corpus_images: int = 60
    categories: tuple[str, ...] = ("apparel", "toys", "jewelry", "garden", "misc")
    image_size: int = 128
    # logo library
    logo_classes: tuple[str, ...] = ("brandx", "brandy")
    styles_per_class: int = 4
    # synthesis
    n_per_class: int = 40
    neg_ratio: float = 1.0
    lookalike_fraction: float = 0.5
    scale_range: tuple[float, float] = (0.15, 0.5)
    rotation_range_deg: tuple[float, float] = (-25.0, 25.0)
    scale_choices: tuple[float, ...] = ()   # non-empty overrides scale_range
    resample: str = "bilinear"
    # thresholds
    t_review: float = 0.50
    t_block: float = 0.90
    # pipeline
    routing: dict = field(default_factory=_default_routing)
    detectors: dict = field(default_factory=_default_detectors)
    workers: int = 1
    min_dim: int = 16
    max_dim: int = 4096
    # http
    bind: str = "127.0.0.1:8080"

    def validate(self) -> None:
        """Raise ConfigError listing every violation; valid config is a no-op."""
        bad: list[str] = []
        if self.seed < 0:
            bad.append(f"seed must be >= 0, got {self.seed}")
        if self.workers < 1:
            bad.append(f"workers must be >= 1, got {self.workers}")
        if self.corpus_images < 1:
            bad.append(f"corpus_images must be >= 1, got {self.corpus_images}")
        if self.image_size < 8:
            bad.append(f"image_size must be >= 8, got {self.image_size}")
        if not self.categories:
            bad.append("categories must be non-empty")
        if not self.logo_classes:
            bad.append("logo_classes must be non-empty")
        if self.styles_per_class < 1:
            bad.append(f"styles_per_class must be >= 1, got {self.styles_per_class}")
        if self.n_per_class < 1:
            bad.append(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.neg_ratio < 0:
            bad.append(f"neg_ratio must be >= 0, got {self.neg_ratio}")
        if not (0.0 <= self.lookalike_fraction <= 1.0):
            bad.append(f"lookalike_fraction must lie in [0, 1], "
                       f"got {self.lookalike_fraction}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            bad.append(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if any(s <= 0 for s in self.scale_choices):
            bad.append(f"scale_choices must be positive, got {self.scale_choices}")
        if self.resample not in ("bilinear", "nearest"):
            bad.append(f"resample must be bilinear or nearest, got {self.resample!r}")
        if not (0.0 <= self.t_review <= 1.0 and 0.0 <= self.t_block <= 1.0):
            bad.append(f"thresholds must lie in [0, 1], "
                       f"got t_review={self.t_review} t_block={self.t_block}")
        elif self.t_review > self.t_block:
            bad.append(f"t_review {self.t_review} > t_block {self.t_block}")
        if self.min_dim < 1 or self.max_dim < self.min_dim:
            bad.append(f"min_dim/max_dim must satisfy 1 <= min <= max, "
                       f"got {self.min_dim}/{self.max_dim}")
        if self.routing.get("rest"):
            bad.append("routing: `rest` must map to no detectors")
        known = set(self.detectors)
        for cat, ids in self.routing.items():
            for det in ids:
                if det not in known:
                    bad.append(f"routing[{cat}]: unknown detector {det!r}")
        try:
            host, port = self.bind.rsplit(":", 1)
            if not host or not (0 < int(port) < 65536):
                raise ValueError
        except ValueError:
            bad.append(f"bind must be host:port, got {self.bind!r}")
        if bad:
            raise ConfigError(bad)

    @property
    def host(self) -> str:
        return self.bind.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.bind.rsplit(":", 1)[1])

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out


_TUPLE_FIELDS = {"categories", "logo_classes", "scale_range",
                 "rotation_range_deg", "scale_choices"}


def _coerce(name: str, ftype: Any, raw: Any, bad: list[str]) -> Any:
    """Bring a file/env value to the field's runtime type."""
    if isinstance(raw, str) and ftype is not str:
        try:
            raw = yaml.safe_load(raw)
        except yaml.YAMLError:
            bad.append(f"{name}: cannot parse {raw!r}")
            return None
    if name in _TUPLE_FIELDS:
        if not isinstance(raw, (list, tuple)):
            bad.append(f"{name}: expected a list, got {type(raw).__name__}")
            return None
        return tuple(raw)
    if ftype is int and isinstance(raw, bool):
        bad.append(f"{name}: expected an integer, got a boolean")
        return None
    if ftype is int and not isinstance(raw, int):
        bad.append(f"{name}: expected an integer, got {raw!r}")
        return None
    if ftype is float:
        if not isinstance(raw, (int, float)) or isinstance(raw, bool):
            bad.append(f"{name}: expected a number, got {raw!r}")
            return None
        return float(raw)
    if ftype is str and not isinstance(raw, str):
        bad.append(f"{name}: expected a string, got {raw!r}")
        return None
    if ftype is dict and not isinstance(raw, dict):
        bad.append(f"{name}: expected a mapping, got {type(raw).__name__}")
        return None
    return raw


def load_config(path: str | Path | None = None,
                env: Mapping[str, str] | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Layer file, environment, and flag overrides onto the defaults."""
    env = os.environ if env is None else env
    bad: list[str] = []
    values: dict[str, Any] = {}
    by_name = {f.name: f for f in fields(RunConfig)}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"config file is not valid YAML: {exc}"]) from exc
        if not isinstance(data, dict):
            raise ConfigError([f"config file must be a mapping, got "
                               f"{type(data).__name__}"])
        for key, raw in data.items():
            if key not in by_name:
                bad.append(f"unknown config key {key!r}")
                continue
            got = _coerce(key, _runtime_type(by_name[key]), raw, bad)
            if got is not None:
                values[key] = got

    for name, f in by_name.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in env:
            got = _coerce(name, _runtime_type(f), env[env_key], bad)
            if got is not None:
                values[name] = got

    for name, raw in (overrides or {}).items():
        if raw is None:
            continue
        if name not in by_name:
            bad.append(f"unknown override {name!r}")
            continue
        got = _coerce(name, _runtime_type(by_name[name]), raw, bad)
        if got is not None:
            values[name] = got

    if bad:
        raise ConfigError(bad)
    config = RunConfig(**values)
    config.validate()
    return config


def _runtime_type(f: dataclasses.Field) -> type:
    """Map a field's annotation to the concrete type _coerce dispatches on."""
    text = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if "int" in text:
        return int
    if "float" in text and "tuple" not in text:
        return float
    if text == "str":
        return str
    if "dict" in text:
        return dict
    return object
