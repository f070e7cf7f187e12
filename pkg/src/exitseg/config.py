"""Run configuration: defaults, JSON config files and command-line overrides.

The effective configuration is a nested dict with sections ``model``,
``train``, ``synth``, ``eval`` and ``bench`` plus the top-level ``seed`` and
``threads``.  Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthSpec
from .trainer import TrainConfig

AUGMENT_KEYS = {"shifts_per_artifact": 1, "mixes_per_artifact": 1}


def defaults() -> dict:
    train = TrainConfig().to_dict()
    del train["seed"], train["variant"]
    return {
        "seed": 0,
        "threads": 1,
        "model": ModelConfig().to_dict(),
        "train": train,
        "synth": {**SynthSpec().to_dict(), **AUGMENT_KEYS},
        "eval": {"samples": 5, "batch_size": 100},
        "bench": {"runs": 5, "samples": 5},
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(base[k], dict) and k not in ("artifact_rates",):
            if not isinstance(v, dict):
                raise ConfigError(f"configuration key {path!r} must be a table")
            out[k] = _merge(base[k], v, path)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def set_path(overrides: dict, dotted: str, value) -> None:
    node = overrides
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"], "variant": cfg["model"]["variant"]})


def synth_spec(cfg: dict) -> tuple[SynthSpec, dict]:
    s = dict(cfg["synth"])
    aug = {k: s.pop(k) for k in AUGMENT_KEYS}
    return SynthSpec(**s), aug


def validate(cfg: dict) -> None:
    model_config(cfg).validate()
    train_config(cfg).validate()
    synth_spec(cfg)[0].validate()
    if cfg["threads"] < 1:
        raise ConfigError("threads must be at least 1")
    if cfg["eval"]["samples"] < 1 or cfg["bench"]["samples"] < 1 or cfg["bench"]["runs"] < 1:
        raise ConfigError("sample and run counts must be at least 1")


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def digest(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def write_effective(cfg: dict, out_dir) -> Path:
    """Echo the effective configuration and its digest into ``out_dir``."""
    path = Path(out_dir) / "effective_config.json"
    path.write_text(json.dumps({"digest": digest(cfg), "config": cfg}, sort_keys=True, indent=2) + "\n")
    return path
