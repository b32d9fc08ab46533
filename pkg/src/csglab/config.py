"""Experiment configuration: one JSON document plus ``--set`` overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

DEFAULTS: dict = {
    "schedule": {"T": 50, "alpha_T": 0.01, "kind": "cosine_alpha"},
    "dataset": {"n": 1200, "seed": 0, "class_mix": "uniform", "dir": "dataset"},
    "train": {
        "epochs": 60, "batch_size": 32, "learning_rate": 2e-3, "beta1": 0.9, "beta2": 0.999,
        "eps_adam": 1e-8, "p_uncond": 0.1, "seed": 0, "dtype": "float32",
        "weights": "weights.bin", "log": "train_log.csv",
    },
    "classifier": {"n_scenes": 3000, "seed": 0, "epochs": 30, "path": "classifier.npz"},
    "backend": {"kind": "toy", "weights": "weights.bin"},
    "guidance": {
        "lambda_pre": 10.0, "delta": 1.5, "cfg_scale": 3.0, "mixup_enabled": True,
        "self_attn_source": "inversion", "method": "csg",
    },
    "task": {"name": "disc_to_square", "src_prompt": "disc", "tgt_prompt": "square", "k": 1,
             "n_scenes": 64, "seed": 0},
    "output_dir": "runs",
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(item: str) -> tuple[list, Any]:
    """``section.key=value``; the value is read as JSON when it parses, else as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.split("."), value


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        keys, value = parse_override(item)
        node = cfg
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {item!r}: {key} is not a section")
        node[keys[-1]] = value
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the file, then overrides. Relative paths resolve against the file's directory."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        cfg = _merge(cfg, doc)
        base_dir = p.resolve().parent
    cfg = apply_overrides(cfg, overrides)
    cfg["_base_dir"] = str(base_dir)
    if not isinstance(cfg["schedule"].get("T"), int) or cfg["schedule"]["T"] < 1:
        raise ConfigError("schedule.T must be a positive integer")
    return cfg


def resolve(cfg: dict, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def output_path(cfg: dict, value) -> Path:
    """Paths for artifacts live under ``output_dir`` unless absolute."""
    p = Path(value)
    return p if p.is_absolute() else resolve(cfg, cfg["output_dir"]) / p


def section(cfg: dict, name: str) -> dict:
    try:
        return cfg[name]
    except KeyError:
        raise ConfigError(f"config lacks the {name!r} section") from None


def require(sec: dict, key: str, name: str = ""):
    try:
        return sec[key]
    except KeyError:
        raise ConfigError(f"config field {name + '.' if name else ''}{key} is missing") from None
