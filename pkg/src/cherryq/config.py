"""Run configuration: one JSON file, CLI overrides on top, defaults underneath.

Precedence is flags > file > defaults. The resolved tree is what every
manifest records.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields

import numpy as np

from .data import ingest, synthetic_corpus, tokenize
from .errors import ConfigError, DataError
from .model import ModelConfig
from .qat import QatConfig, TrainConfig
from .quant import QuantConfig

DATA_DIR_ENV = "CHERRYQ_DATA_DIR"

DEFAULTS: dict = {
    "corpus": None,
    "val_fraction": 0.1,
    "model": {**asdict(ModelConfig()), "width": 64, "context": 64},
    "train": {**asdict(TrainConfig()), "steps": 2000, "floor_frac": 0.02, "weight_decay": 0.1},
    "qat": {**{k: v for k, v in asdict(QatConfig(quant=None)).items() if k not in ("quant", "floor_frac")},
            "floor_frac": None, "peak_lr": 1e-4, "steps": 150,
            "quant": {**QuantConfig().to_dict(), "group_size": 32, "scale_trick": None}},
    "analyze": {"calib_sequences": 64, "splits": 2, "scatter_samples": 4096, "seed": 0},
    "eval": {"batch_size": 64},
}


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def resolve(path=None, overrides: list[str] | None = None, flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, from_file)
    patch: dict = {}
    for text in overrides or []:
        keys, value = parse_override(text)
        node = patch
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        node = patch
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return _merge(cfg, patch)


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, cfg["model"], "model")


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"], "train")


def quant_config(cfg: dict) -> QuantConfig:
    if cfg["qat"]["quant"] is None:
        raise ConfigError("qat.quant is null; this subcommand needs a quantization recipe")
    return _build(QuantConfig, cfg["qat"]["quant"], "qat.quant")


def cherry_fraction(cfg: dict) -> float:
    """The configured fraction, or 1/256 when the config has none (analysis still needs one)."""
    q = cfg["qat"]["quant"]
    frac = q.get("cherry_fraction", 0) if q else 0
    return frac if frac and frac > 0 else 1 / 256


def qat_config(cfg: dict) -> QatConfig:
    section = dict(cfg["qat"])
    q = section.pop("quant")
    return _build(QatConfig, {**section, "quant": None if q is None else quant_config(cfg)}, "qat")


def resolve_corpus_path(spec: str) -> str:
    if os.path.isabs(spec) or os.path.exists(spec):
        return spec
    base = os.environ.get(DATA_DIR_ENV)
    return os.path.join(base, spec) if base else spec


def load_corpus(spec: str | None) -> np.ndarray:
    """A path, or ``synthetic:<bytes>:<seed>`` for the built-in generator."""
    if not spec:
        raise DataError(f"no corpus given (use --corpus, the config file, or set {DATA_DIR_ENV})")
    if spec.startswith("synthetic:"):
        try:
            _, n, seed = spec.split(":")
            return tokenize(synthetic_corpus(int(n), int(seed)))
        except ValueError as exc:
            raise ConfigError(f"bad synthetic corpus spec {spec!r}; expected synthetic:<bytes>:<seed>") from exc
    return ingest(resolve_corpus_path(spec))
