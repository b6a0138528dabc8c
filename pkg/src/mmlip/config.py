"""Experiment configuration: YAML with documented defaults and strict key checking."""

from __future__ import annotations

import copy
from typing import Any

import yaml

from .errors import InvalidSpecError

# Every key the runner understands, with its default. Comments double as the schema docs.
DEFAULTS: dict = {
    "dataset": {
        "n_samples": 100,          # raw timesteps before windowing
        "shared_latent_dim": 4,
        "modality_dims": [64, 4],  # image-like vector, then sensor channels
        "noise_std": 0.05,
        "window_length": 20,
        "window_step": 1,
        "seed": 0,
        "temporal_modality": -1,   # windowed modality index, or null
    },
    "model": {
        "hidden_widths": [32],     # encoder hidden layers; decoders mirror them
        "latent_dim": 16,
        "activation": "relu",
        "fusions": ["sum", "concat", "attention"],
        "attention": {
            "unit_norm_inputs": True,
            "spectral_normalize": True,
            "scale_by_sqrt_d": True,
            "layers": 2,
        },
    },
    "training": {
        "epochs": 200,
        "batch_size": 64,
        "learning_rate": 1.0e-3,
        "lambda_reg": 1.0e-5,
        "seed": 0,
        "trials": 1,
        "lipschitz_every": 10,
        "lipschitz_pairs": 512,
    },
    "estimation": {
        "domain": "data",          # "data" (pairs of samples) or "box" ([low, high]^dim)
        "low": -1.0,
        "high": 1.0,
        "n_samples": 4096,
        "epsilon": 1.0e-9,
        "seed": 0,
    },
    "bounds": {
        "l_dec_grad": None,        # scalar or per-decoder list; rows needing it are marked otherwise
        "l_agg_grad": None,        # scalar or per-encoder list
        "attention_grad_constant": None,  # C_n; null means 4n
    },
    "ablation": {
        "lambdas": [1.0e-9, 1.0e-7, 1.0e-5, 1.0e-3, 1.0e-1],
    },
    "detection": {
        "kernel": "rbf",
        "gamma": None,             # null selects the median heuristic
        "k_components": 8,
        "fault": {
            "fraction": 0.5,       # of the test split
            "kind": "bias",
            "magnitude": 5.0,
            "affected_modalities": [0],
            "seed": 0,
        },
    },
}

# keys whose value may be null or a number/list even though the default says otherwise
_NULLABLE = {
    ("dataset", "temporal_modality"),
    ("bounds", "l_dec_grad"),
    ("bounds", "l_agg_grad"),
    ("bounds", "attention_grad_constant"),
    ("detection", "gamma"),
}
_SEED_PATHS = [("dataset", "seed"), ("training", "seed"), ("estimation", "seed"), ("detection", "fault", "seed")]


class ConfigError(InvalidSpecError):
    pass


def _line(node) -> int:
    return node.start_mark.line + 1


def _check(node, defaults, path, source):
    """Walk the composed YAML tree against the defaults; report the first unknown key."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:{_line(node)}: section '{'.'.join(path) or '<root>'}' must be a mapping")
    for key_node, value_node in node.value:
        key = key_node.value
        if key not in defaults:
            where = ".".join(path + (key,))
            raise ConfigError(f"{source}:{_line(key_node)}: unknown key '{where}'")
        if isinstance(defaults[key], dict):
            _check(value_node, defaults[key], path + (key,), source)


def _merge(defaults: dict, given: dict, path=()) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in (given or {}).items():
        here = path + (key,)
        default = defaults[key]
        if isinstance(default, dict):
            out[key] = _merge(default, value or {}, here)
            continue
        out[key] = _coerce(value, default, here)
    return out


def _coerce(value, default, path):
    name = ".".join(path)
    if value is None:
        if default is None or path in _NULLABLE:
            return None
        raise ConfigError(f"'{name}' may not be null")
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{name}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{name}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{name}' must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{name}' must be a list")
        return value
    return value


def parse(text: str, source: str = "<config>") -> dict:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if node is None:
        return copy.deepcopy(DEFAULTS)
    _check(node, DEFAULTS, (), source)
    return _merge(DEFAULTS, yaml.safe_load(text))


def load(path=None, seed_override: int | None = None) -> dict:
    """Effective config: defaults overlaid with the file at ``path`` (if any)."""
    if path is None:
        cfg = copy.deepcopy(DEFAULTS)
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse(text, str(path))
    if seed_override is not None:
        for p in _SEED_PATHS:
            node = cfg
            for key in p[:-1]:
                node = node[key]
            node[p[-1]] = int(seed_override)
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def get(cfg: dict, dotted: str) -> Any:
    node = cfg
    for key in dotted.split("."):
        node = node[key]
    return node
