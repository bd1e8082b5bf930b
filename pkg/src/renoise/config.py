"""Run configuration: YAML loading with key validation, ``--set`` overrides, and object construction."""

from __future__ import annotations

import copy
from typing import Any

import numpy as np
import yaml

from .core import Schedule, build_ancestral_schedule, build_ddim_schedule, build_euler_ode_schedule, euler_times
from .inversion import NoiseCorrectionConfig, RenoiseConfig, RenoiseWeights, WeightBand, preset_config
from .regularize import EditLossConfig


class ConfigError(ValueError):
    pass


# Leaves are defaults; nested dicts are sections. Keys not listed here are rejected.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "out",
    "latent": {"shape": [4, 4], "scale": 1.0},
    "predictor": {"kind": "seeded_nonlinear", "a": 1.0, "matrix": None, "scale": None, "seed": 0,
                  "width": 32, "gain": 0.5},
    "schedule": {"kind": "ddim", "steps": 4, "alpha_bar": None, "alpha_bar_min": 0.05, "eta": 1.0,
                 "t0": 0.0, "step_size": 0.1},
    "renoise": {
        "preset": None,
        "k": 0,
        "weights": "default",
        "weight_threshold": 0.25,
        "weight_bands": None,
        "max_estimate_history": None,
        "noise_correction": {"mode": "off", "eta": 0.5, "iters": 1},
        "edit_loss": {"lambda_pair": 0.0, "lambda_patch_kl": 0.0, "patch_size": 4, "step_size": None,
                      "shifts": [[1, 0], [0, 1]]},
    },
    "metrics": {"peak": 1.0},
    "diagnose": {"power_iters": 50, "jacobians": True},
    "sweep": {"configs": [[8, 4, 0], [4, 4, 1]], "workers": 1},
}

# section aliases accepted at top level
ALIASES = {"edit": ("renoise", "edit_loss"), "nc": ("renoise", "noise_correction")}


def _where(node) -> str:
    mark = node.start_mark
    return f"line {mark.line + 1}, column {mark.column + 1}"


def _check_node(node, schema: dict, path: str, source: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}: {path or 'config'} must be a mapping ({_where(node)})")
    for key_node, value_node in node.value:
        key = key_node.value
        full = f"{path}.{key}" if path else key
        if not path and key in ALIASES:
            sec, sub = ALIASES[key]
            _check_node(value_node, DEFAULTS[sec][sub], full, source)
            continue
        if key not in schema:
            raise ConfigError(f"{source}: unknown key '{full}' at {_where(key_node)}")
        if isinstance(schema[key], dict):
            _check_node(value_node, schema[key], full, source)


def _merge(base: dict, update: dict):
    for key, value in update.items():
        if isinstance(base.get(key), dict) and isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value


def parse_config(text: str, source: str = "<config>") -> dict:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: malformed YAML: {exc}") from exc
    cfg = copy.deepcopy(DEFAULTS)
    if root is None:
        return cfg
    _check_node(root, DEFAULTS, "", source)
    data = yaml.safe_load(text)
    for alias, (sec, sub) in ALIASES.items():
        if alias in data:
            _merge(cfg[sec][sub], data.pop(alias))
    _merge(cfg, data)
    return cfg


def load_config(path) -> dict:
    with open(path) as f:
        return parse_config(f.read(), str(path))


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``key.path=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] in ALIASES:
        parts = list(ALIASES[parts[0]]) + parts[1:]
    schema, node = DEFAULTS, cfg
    for i, part in enumerate(parts):
        if not isinstance(schema, dict) or part not in schema:
            raise ConfigError(f"--set: unknown key '{key}'")
        if i == len(parts) - 1:
            if isinstance(schema[part], dict):
                raise ConfigError(f"--set: '{key}' is a section, not a value")
            node[part] = yaml.safe_load(raw)
        else:
            schema, node = schema[part], node[part]


def build_schedule(spec: dict, steps: int | None = None) -> Schedule:
    kind = spec["kind"]
    n = steps or spec["steps"]
    if kind in ("ddim", "ancestral"):
        if spec["alpha_bar"] is not None and steps is None:
            abar = spec["alpha_bar"]
        else:
            abar = [spec["alpha_bar_min"] ** (i / n) for i in range(1, n + 1)]
        return build_ddim_schedule(abar) if kind == "ddim" else build_ancestral_schedule(abar, spec["eta"])
    if kind == "euler_ode":
        h = [spec["step_size"]] * n
        return build_euler_ode_schedule(euler_times(spec["t0"], h), h)
    raise ConfigError(f"schedule.kind: unknown schedule kind {kind!r}")


def build_renoise_config(spec: dict, K: int | None = None, T: int | None = None) -> RenoiseConfig:
    if spec["preset"] is not None:
        if T is None:
            raise ConfigError("renoise.preset needs the schedule length")
        base = preset_config(spec["preset"], T, float(spec["weight_threshold"]))
        nc = spec["noise_correction"]
        return RenoiseConfig(base.K, base.weights, base.edit_loss,
                             NoiseCorrectionConfig(nc["mode"], float(nc["eta"]), int(nc["iters"])),
                             base.weight_threshold, spec["max_estimate_history"])
    K = spec["k"] if K is None else K
    if spec["weight_bands"]:
        weights = RenoiseWeights(tuple(WeightBand(int(b["t_min"]), int(b["t_max"]), tuple(b["weights"]))
                                       for b in spec["weight_bands"]))
    elif spec["weights"] == "last":
        weights = RenoiseWeights.last(K)
    elif spec["weights"] == "uniform":
        weights = RenoiseWeights.constant([1.0 / (K + 1)] * (K + 1))
    elif spec["weights"] == "default":
        weights = None
    else:
        raise ConfigError(f"renoise.weights: unknown policy {spec['weights']!r}")
    el = spec["edit_loss"]
    edit = EditLossConfig(float(el["lambda_pair"]), float(el["lambda_patch_kl"]), int(el["patch_size"]),
                          tuple(tuple(s) for s in el["shifts"]), el["step_size"])
    nc = spec["noise_correction"]
    return RenoiseConfig(
        K=int(K),
        weights=weights,
        edit_loss=edit if edit.active else None,
        noise_correction=NoiseCorrectionConfig(nc["mode"], float(nc["eta"]), int(nc["iters"])),
        weight_threshold=float(spec["weight_threshold"]),
        max_estimate_history=spec["max_estimate_history"],
    )


def predictor_spec(cfg: dict) -> dict:
    spec = {k: v for k, v in cfg["predictor"].items() if v is not None}
    if spec.get("kind") == "linear" and "scale" not in spec:
        spec["scale"] = 0.5
    if spec.get("kind") == "seeded_nonlinear" and "scale" not in spec:
        spec["scale"] = 1.0
    return spec


def latent_dim(cfg: dict) -> int:
    return int(np.prod(cfg["latent"]["shape"]))
