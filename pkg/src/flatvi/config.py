"""Run configuration: defaults, JSON loading with strict key checking, lock files."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .errors import ConfigError

LOCK_NAME = "config.lock.json"
VERSION_KEY = "flatvi_version"
SEED_ENV = "FLATVI_SEED"

# Every key is documented in the README; values here are the defaults.
DEFAULTS: dict[str, dict] = {
    "data": {
        "n": 1000,
        "genes": 10,
        "n_classes": 3,
        "seed": 0,
    },
    "vae": {
        "latent_dim": 2,
        "hidden": [256],
        "batch_size": 32,
        "max_epochs": 1000,
        "learning_rate": 1e-3,
        "kl_anneal_epochs": 1000,
        "patience": 20,
        "seed": 0,
        "val_fraction": 0.2,
        "use_size_factor": True,
    },
    "geometry": {
        "lambda": 0.0,
        "flat_subsample": None,
    },
    "geodesic": {
        "K": 8,
        "iters": 500,
        "lr": 1e-2,
        "n_steps": 100,
    },
    "cfm": {
        "sigma": 0.1,
        "batch": 256,
        "epochs": 2000,
        "lr": 1e-3,
        "ode_steps": 100,
        "seed": 0,
    },
    "eval": {
        "k_list": [3, 5, 10],
        "subsample": 256,
        "seeds": [0, 1, 2],
    },
}

# keys whose default is None and which otherwise hold an int
_OPTIONAL_INT = {("geometry", "flat_subsample")}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _check_value(section: str, key: str, value, default):
    name = f"{section}.{key}"
    if (section, key) in _OPTIONAL_INT:
        if value is None:
            return None
        default = 0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{name}: unsupported value {value!r}")


def merge(base: dict, overrides: dict) -> dict:
    """Overlay ``overrides`` onto ``base``, rejecting unknown sections and keys."""
    if not isinstance(overrides, dict):
        raise ConfigError("configuration must be a JSON object")
    out = copy.deepcopy(base)
    for section, values in overrides.items():
        if section == VERSION_KEY:
            continue
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (a lock file is accepted as-is)."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return merge(cfg, doc)


def apply_seed_env(cfg: dict, environ=None) -> dict:
    """``FLATVI_SEED`` replaces the data, vae and cfm seeds."""
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    cfg = copy.deepcopy(cfg)
    for section in ("data", "vae", "cfm"):
        cfg[section]["seed"] = seed
    return cfg


def write_lock(cfg: dict, directory, version: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {VERSION_KEY: version, **cfg}
    path = directory / LOCK_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
