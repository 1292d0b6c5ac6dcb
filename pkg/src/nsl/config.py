"""Run configurations: JSON files merged over per-command defaults.

Every nested mapping in the defaults is a closed schema: keys that are not
in it are rejected.  A default of ``None`` accepts any JSON value.
Overrides are dotted paths (``train.epochs=3``) whose values are parsed as
JSON, falling back to a plain string.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

from .data import SynthSpec
from .errors import ConfigurationError
from .fewshot import FewshotConfig, MetaConfig
from .network import PredictorConfig
from .training import TrainConfig

CONFIG_NAME = "config.json"


def _data(classes=4, per_class=40, size=12):
    return {
        "source": "synth",
        "synth": SynthSpec(classes=classes, per_class=per_class, size=size).to_dict(),
        "test_per_class": per_class // 2,
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
    }


def _model(preset="synth-3"):
    return {
        "preset": preset,
        "spec": None,
        "similarity": "none",
        "mode": "static",
        "predictor": asdict(PredictorConfig()),
    }


DEFAULTS = {
    "train": {
        "seed": 0,
        "out_dir": "runs/train",
        "data": _data(),
        "model": _model(),
        "train": TrainConfig(epochs=5, batch_size=16, lr=0.05).to_dict(),
        "pretrained": None,
        "recipe": "joint",
        "phase2": None,
    },
    "eval": {
        "seed": 0,
        "out_dir": "runs/eval",
        "data": _data(),
    },
    "fewshot": {
        "seed": 0,
        "out_dir": "runs/fewshot",
        "data": _data(classes=10, per_class=20, size=12),
        "base_classes": 5,
        "strategy": "static",
        "ways": 3,
        "shots": 2,
        "queries": 5,
        "episodes": 10,
        "model": {**_model(), "similarity": "diagonal"},
        "pretrain": TrainConfig(epochs=5, batch_size=16, lr=0.05).to_dict(),
        "finetune": asdict(FewshotConfig(epochs=20)),
        "meta": MetaConfig(outer_steps=20, lr=1e-2).to_dict(),
    },
    "gradflow": {
        "seed": 0,
        "out_dir": "runs/gradflow",
        "mode": "standard",
        "n": 6,
        "m": 2,
        "samples": 3,
        "consistent": True,
        "dt": 1e-3,
        "steps": 5000,
        "stop_tol": 0.0,
        "init_std": 1e-3,
        "retries": 5,
    },
}


def _merge(base, update, path: str):
    if not isinstance(update, Mapping):
        raise ConfigurationError(f"{path or 'config'} must be a JSON object")
    out = copy.deepcopy(dict(base))
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], Mapping) and value is not None:
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _nest(keys, value):
    for k in reversed(keys):
        value = {k: value}
    return value


def resolve(command: str, path=None, overrides=(), **flags) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then explicit flags."""
    if command not in DEFAULTS:
        raise ConfigurationError(f"no configuration schema for {command!r}")
    cfg = copy.deepcopy(DEFAULTS[command])
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cfg = _merge(cfg, loaded, "")
    for item in overrides:
        keys, value = parse_override(item)
        cfg = _merge(cfg, _nest(keys, value), "")
    for key, value in flags.items():
        if value is not None:
            cfg = _merge(cfg, {key: value}, "")
    return cfg


def save_config(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_NAME
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
