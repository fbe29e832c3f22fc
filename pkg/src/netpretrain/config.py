"""Run configuration: JSON files validated against a fixed schema.

Unknown keys are rejected; CLI flags override config keys; every run writes
its fully-resolved config next to its outputs, and reports carry a digest
of it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


DEFAULT_CONFIG: dict = {
    "model": {
        "hidden_dim": 64,
        "layers": 4,
        "heads": 4,
        "max_len": 32,
        "neighbors": 5,
        "dropout": 0.1,
        "include_self_in_gnn": True,
        "layer_norm_eps": 1e-5,
    },
    "pretrain": {
        "objective": "joint",
        "epochs": 5,
        "max_steps": None,
        "batch_size": 512,
        "peak_lr": 1e-5,
        "warmup_frac": 0.1,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "clip_norm": 1.0,
        "weight_decay": 0.0,
        "mask_ratio": 0.15,
        "mnp_filter_false_negatives": False,
        "checkpoint_interval": 1000,
        "edge_holdout": 0.0,
        "seed": 7,
    },
    "task": {
        "kind": "classify",
        "shots": None,          # per-kind default: 8 / 16 / 32 / 32
        "epochs": None,         # per-kind default: 500 / 1000 / 1000 / 200
        "peak_lr": 1e-5,
        "warmup_frac": 0.1,
        "batch_size": 32,
        "eval_batch_size": 256,
        "eval_interval": None,  # per-kind default: 25 / 100 / 1000 / 20
        "seed": 7,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "clip_norm": 1.0,
        "weight_decay": 0.0,
        "bm25_top_n": 100,
        "hard_negatives": 4,
    },
    "data": {
        "nodes": None,
        "edges": None,
        "vocab": None,
        "labels_coarse": None,
        "labels_fine": None,
        "label_names_fine": None,
        "edges_task": None,
        "splits": None,
    },
    "output": {
        "dir": "runs/out",
    },
}

TASK_KIND_DEFAULTS = {
    "classify": {"shots": 8, "epochs": 500, "eval_interval": 25},
    "retrieve": {"shots": 16, "epochs": 1000, "eval_interval": 100},
    "rerank": {"shots": 32, "epochs": 1000, "eval_interval": 1000},
    "linkpred": {"shots": 32, "epochs": 200, "eval_interval": 20},
}


def _check_keys(user: dict, schema: dict, path: str = "") -> None:
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a section")
            _check_keys(value, schema[key], here)


def _merge(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user: dict) -> dict:
    """Validate ``user`` against the schema and merge it over the defaults,
    then fill task values that depend on the task kind."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(user, DEFAULT_CONFIG)
    cfg = _merge(DEFAULT_CONFIG, user)
    kind = cfg["task"]["kind"]
    if kind not in TASK_KIND_DEFAULTS:
        raise ConfigError(f"task.kind must be one of {sorted(TASK_KIND_DEFAULTS)}, got {kind!r}")
    for key, value in TASK_KIND_DEFAULTS[kind].items():
        if cfg["task"][key] is None:
            cfg["task"][key] = value
    return cfg


def load_config(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    return resolve_config(user)


def apply_overrides(cfg: dict, overrides: dict[str, object]) -> dict:
    """Set dotted-path keys (e.g. "pretrain.seed") on a resolved config."""
    cfg = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = cfg
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = value
    return cfg


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def write_resolved(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return path
