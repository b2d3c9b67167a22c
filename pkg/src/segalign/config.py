"""Layered run configuration: defaults < config file < environment < flags.

Environment overrides use ``SEGALIGN_<SECTION>__<KEY>=value`` (values parsed
as JSON when possible, else kept as strings); flag overrides use
``section.key=value`` strings with the same parsing.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .errors import ConfigError

ENV_PREFIX = "SEGALIGN_"

DEFAULTS: dict = {
    "seed": 0,
    "threads": None,
    "synth": {
        "n_gallery": 20,
        "n_queries": 5,
        "max_copies": 2,
        "dim": 64,
        "fps": 2.0,
        "length_range": [48, 96],
        "extent_range": [8, 24],
        "train_pairs": 120,
    },
    "teacher": {"threshold": 0.85, "min_gap": 4, "max_gap": 64},
    "keyframe": {"source": "teacher", "interval": 8, "threshold": 0.5},
    "index": {"kind": "flat", "k_c": 16, "nprobe": 4, "topN": 50, "floor": 0.5, "kmeans_iters": 20},
    "align": {
        "method": "spd",
        "dp": {"min_sim": 0.7, "gap_penalty": 0.1, "band_width": None, "min_score": 1.0, "max_segments": 10},
        "hough": {"offset_bin": 1.0, "min_votes": 3, "min_sim": 0.7},
        "tn": {"max_frame_gap": 3, "min_sim": 0.7},
    },
    "detector": {"input_size": 128, "min_score": 0.05, "nms_iou": 0.5, "max_dets": 20, "model": None},
    "train": {"epochs": 12, "lr": 0.01, "batch": 16, "momentum": 0.937, "weight_decay": 0.0005},
    "eval": {"score_threshold": None, "unit": 1.0},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _nest(dotted: str, value) -> dict:
    keys = [k for k in dotted.split(".") if k]
    if not keys:
        raise ConfigError(f"bad override {dotted!r}")
    d = value
    for k in reversed(keys):
        d = {k: d}
    return d


def load_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def env_overrides(environ=None) -> list[dict]:
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            parts = name[len(ENV_PREFIX):].split("__")
            out.append(_nest(".".join(_env_key(parts)), _parse_value(environ[name])))
    return out


def _env_key(parts: list[str]) -> list[str]:
    """Map upper-case env name parts onto the (possibly mixed-case) default keys."""
    keys, node = [], DEFAULTS
    for p in parts:
        match = next((k for k in node if k.lower() == p.lower()), p.lower()) if isinstance(node, dict) else p.lower()
        keys.append(match)
        node = node.get(match) if isinstance(node, dict) else None
    return keys


def flag_overrides(items) -> list[dict]:
    out = []
    for it in items or ():
        if "=" not in it:
            raise ConfigError(f"override {it!r} is not key=value")
        k, v = it.split("=", 1)
        out.append(_nest(k.strip(), _parse_value(v)))
    return out


def _validate(cfg: dict) -> None:
    if cfg["align"]["method"] not in ("spd", "dp", "hough", "tn"):
        raise ConfigError(f"unknown align.method {cfg['align']['method']!r}")
    if cfg["keyframe"]["source"] not in ("teacher", "scorer", "uniform", "all"):
        raise ConfigError(f"unknown keyframe.source {cfg['keyframe']['source']!r}")
    if cfg["index"]["kind"] not in ("flat", "ivf"):
        raise ConfigError(f"unknown index.kind {cfg['index']['kind']!r}")
    if cfg["index"]["topN"] < 1 or cfg["synth"]["n_gallery"] < 1 or cfg["synth"]["n_queries"] < 1:
        raise ConfigError("topN, n_gallery and n_queries must be positive")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def resolve(path=None, overrides=(), environ=None) -> dict:
    """Defaults, then the file, then the environment, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    layers = ([load_file(path)] if path else []) + env_overrides(environ) + list(overrides)
    for layer in layers:
        cfg = _merge(cfg, layer)
    _validate(cfg)
    return cfg


def canonical(cfg: dict) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg)).hexdigest()
