"""Run configuration: JSON document, dotted overrides and a canonical digest."""
from __future__ import annotations

import copy
import hashlib
import json
import os

DEFAULTS = {
    "seed": 0,
    "output": "runs/default",
    "dataset": {
        "synthetic": {
            "n_identities": 20, "train_per_id": 8, "query_per_id": 4, "gallery_per_id": 8,
            "cameras": 2, "height": 64, "width": 32, "clutter": 0.3, "illumination": 0.3,
            "occluder_prob": 0.4, "kind": "person",
        },
        "path": None,
    },
    "model": {
        "n_slots": 4, "d_word": 32, "d_embed": 32, "text_layers": 2, "text_heads": 2,
        "context": 16, "image_dim": 32, "image_layers": 2, "image_heads": 2, "patch": 8,
        "height": 64, "width": 32, "kind": "person",
    },
    "stage1": {
        "epochs": 60, "batch_size": 64, "lr": 3.5e-4, "alpha": 0.5, "lambda_lss": 0.8,
        "tau": 0.07, "detach_masked": False,
    },
    "stage2": {
        "epochs": 60, "P": 16, "K": 4, "lr_start": 1e-3, "lr_peak": 1e-2,
        "warmup_epochs": 10, "milestones": [30, 50], "gamma": 0.1, "beta": 1 / 3,
        "lambda_vss": 0.8, "tau": 0.07, "margin": 0.3, "epsilon": 0.1,
        "pair_mode": "identity",
    },
    "eval": {"ranks": [1, 5, 10]},
}


class ConfigError(ValueError):
    pass


def default_config():
    return copy.deepcopy(DEFAULTS)


def _merge(base, over, path=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    """Apply one ``a.b.c=value`` override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = parse_value(raw)
    return cfg


def load_config(path=None, overrides=()):
    cfg = default_config()
    if path:
        with open(path, encoding="utf-8") as fh:
            _merge(cfg, json.load(fh))
    for o in overrides:
        apply_override(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg):
    ds = cfg["dataset"]
    has_path = ds.get("path") is not None
    has_syn = ds.get("synthetic") is not None
    if has_path == has_syn:
        raise ConfigError("dataset needs exactly one of 'synthetic' or 'path'")
    if has_path and not os.path.exists(ds["path"]):
        raise ConfigError(f"dataset path {ds['path']} does not exist")
    s1, s2 = cfg["stage1"], cfg["stage2"]
    if not 0 <= s1["alpha"] <= 1:
        raise ConfigError("stage1.alpha must lie in [0, 1]")
    if not 0 <= s2["beta"] < 1:
        raise ConfigError("stage2.beta must lie in [0, 1)")
    if s1["lambda_lss"] < 0 or s2["lambda_vss"] < 0:
        raise ConfigError("loss weights must be nonnegative")
    if s2["pair_mode"] not in ("identity", "instance"):
        raise ConfigError("stage2.pair_mode must be 'identity' or 'instance'")
    return cfg


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def digest(cfg):
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()
