"""
ws_config.py — Versioned JSON configuration: defaults, merge, validation, hash.

Sections:
  meta     config_version / name
  seed     global seed for initialization, crops and synthetic data
  model    architecture (variant, n_i, n_j, channels, lookup, heads)
  train    toy trainer (steps, lr, optimizer, weight decay, gamma, n_k, crop)
  eval     evaluation (n_k, Canny thresholds)
  runtime  threads

A file only needs the keys it changes; everything else comes from
DEFAULT_CONFIG. Unknown keys are logged and dropped.
"""

import copy
import hashlib
import json
import logging
from typing import Any, Dict, Optional

from ws_tensor import ConfigError

logger = logging.getLogger("ws")

CONFIG_VERSION = "1.0"
CONFIG_FILENAME = "ws_config.json"

VARIANTS = ("full", "baseline", "no_hpu", "no_fh")
HSA_POOLING = ("channel", "spatial")
UPSAMPLE = ("bilinear", "convex")
OPTIMIZERS = ("sgd", "adam", "adamw")

DEFAULT_CONFIG: Dict[str, Any] = {
    "meta": {"config_version": CONFIG_VERSION, "name": "desk-toy"},
    "seed": 17,
    "model": {
        "variant": "full",
        "n_i": 3,
        "high_levels": 3,
        "n_j": 4,
        "lookup_radius": 4,
        "pyramid_levels": 4,
        "matching_channels": 64,
        "feature_channels": 32,
        "encoder_g_channels": [32, 32],
        "encoder_d_channels": [16, 16],
        "head_channels": 32,
        "head_zero_init": True,
        "hsa_pooling": "channel",
        "upsample": "bilinear",
        "detach_lookup_disparity": True,
    },
    "train": {
        "steps": 500,
        "lr": 0.02,
        "optimizer": "sgd",
        "adam_betas": [0.9, 0.999],
        "adam_eps": 1e-8,
        "weight_decay": 1e-5,
        "clip": 1.0,
        "gamma": 0.9,
        "n_k": 8,
        "crop": None,
        "log_every": 50,
    },
    "eval": {"n_k": 16, "canny_low": 100, "canny_high": 200},
    "runtime": {"threads": 1},
}


def _merge(base: Dict[str, Any], override: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            logger.warning("config: unknown key %r ignored", where)
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config: {where} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(f"config: {msg}")


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_config(cfg: Dict[str, Any]) -> Dict[str, Any]:
    m, t, e = cfg["model"], cfg["train"], cfg["eval"]
    _require(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    _require(m["variant"] in VARIANTS, f"model.variant must be one of {VARIANTS}")
    _require(m["n_i"] == 3, "model.n_i must be 3 (the high-frequency extractor wires three levels); "
             "set model.high_levels to inject fewer of them")
    _require(_is_int(m["high_levels"]) and 1 <= m["high_levels"] <= 3, "model.high_levels must be in 1..3")
    _require(_is_int(m["n_j"]) and 1 <= m["n_j"] <= 6, "model.n_j must be in 1..6")
    _require(_is_int(m["lookup_radius"]) and m["lookup_radius"] >= 0, "model.lookup_radius must be >= 0")
    _require(_is_int(m["pyramid_levels"]) and m["pyramid_levels"] >= 1, "model.pyramid_levels must be >= 1")
    for key in ("matching_channels", "feature_channels", "head_channels"):
        _require(_is_int(m[key]) and m[key] >= 1, f"model.{key} must be a positive integer")
    for key in ("encoder_g_channels", "encoder_d_channels"):
        chans = m[key]
        _require(isinstance(chans, list) and len(chans) == 2 and all(_is_int(c) and c >= 1 for c in chans),
                 f"model.{key} must list two positive channel counts")
    _require(m["hsa_pooling"] in HSA_POOLING, f"model.hsa_pooling must be one of {HSA_POOLING}")
    _require(m["upsample"] in UPSAMPLE, f"model.upsample must be one of {UPSAMPLE}")

    _require(_is_int(t["steps"]) and t["steps"] >= 1, "train.steps must be >= 1")
    _require(float(t["lr"]) > 0, "train.lr must be > 0")
    _require(t["optimizer"] in OPTIMIZERS, f"train.optimizer must be one of {OPTIMIZERS}")
    _require(float(t["clip"]) > 0, "train.clip must be > 0")
    _require(0 < float(t["gamma"]) <= 1, "train.gamma must be in (0, 1]")
    _require(_is_int(t["n_k"]) and t["n_k"] >= 1, "train.n_k must be >= 1")
    _require(_is_int(t["log_every"]) and t["log_every"] >= 1, "train.log_every must be >= 1")
    crop = t["crop"]
    if crop is not None:
        _require(isinstance(crop, list) and len(crop) == 2
                 and all(_is_int(c) and c >= 16 and c % 16 == 0 for c in crop),
                 "train.crop must be null or [h, w] with multiples of 16")
    b1, b2 = t["adam_betas"]
    _require(0 <= b1 < 1 and 0 <= b2 < 1, "train.adam_betas must lie in [0, 1)")
    _require(float(t["weight_decay"]) >= 0, "train.weight_decay must be >= 0")

    _require(_is_int(e["n_k"]) and e["n_k"] >= 1, "eval.n_k must be >= 1")
    _require(0 <= e["canny_low"] <= e["canny_high"], "eval.canny_low must be <= eval.canny_high")
    _require(_is_int(cfg["runtime"]["threads"]) and cfg["runtime"]["threads"] >= 1,
             "runtime.threads must be >= 1")
    return cfg


def make_config(overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Defaults merged with an in-memory override dict, validated."""
    return validate_config(_merge(DEFAULT_CONFIG, overrides or {}))


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    if path is None:
        return make_config()
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a JSON object, got {type(raw).__name__}")
    version = (raw.get("meta") or {}).get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: config_version {version!r} is not supported (expected {CONFIG_VERSION})")
    cfg = make_config(raw)
    logger.info("Loaded config %s (%s, variant=%s)", path, cfg["meta"]["name"], cfg["model"]["variant"])
    return cfg


def config_hash(cfg: Dict[str, Any]) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
