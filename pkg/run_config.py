"""
YAML run configuration: defaults reproduce the reference experiment
(T=1, K=40, N=30, J=60, 20 epochs of 500 steps). Files are deep-merged over
DEFAULT_CONFIG; unknown keys and wrong types are errors, never warnings.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

from adversarial_trainer import ConfigError, TrainConfig
from market_model import SUPPLY_PRESETS, MarketModel, lq_model, supply_model

DEFAULT_CONFIG: dict = {
    "model": {
        "lambda_x": 1.0,
        "x_ref": 1.0,
        "lambda_T": 1.0 / math.e,
        "initial_mean": -0.25,
        "initial_std": 0.2,
        "horizon": 1.0,
        "initial_supply": 0.0,
        "supply": "oscillating",
        "supply_reversion": 1.0,
    },
    "discretization": {"steps": 40},
    "training": {
        "iterations": 10000,
        "epoch_size": 500,
        "n_train": 30,
        "n_test": 30,
        "mc_samples": 60,
        "lr_v": 1e-3,
        "lr_pi": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_adam": 1e-8,
        "clip_norm": 10.0,
        "workers": 1,
    },
    "oracle": {
        "ode_refinement": 10,
        "min_ode_steps": 400,
        "consistency_factor": 100.0,
        "w0_override": None,
    },
    "output": {"dir": "runs/default", "timing_in_metrics": False},
    "seed": 0,
}

# Keys whose default is None (or a float) that also accept null.
NULLABLE = {("oracle", "w0_override"), ("training", "clip_norm")}


def _check_value(key: tuple[str, ...], value, default):
    """Type-check one leaf against its default; returns the value to store."""
    dotted = ".".join(key)
    if value is None:
        if key in NULLABLE:
            return None
        raise ConfigError(f"{dotted} must not be null")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        # YAML 1.1 reads 1e-3 (no decimal point) as a string.
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        expected = "number" if default is None else type(default).__name__
        raise ConfigError(f"{dotted} must be a {expected}, got {value!r}")
    return value


def _merge(base: dict, override: dict, path: tuple[str, ...] = ()) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        here = path + (str(key),)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(here)} must be a section (mapping), got {value!r}")
            merged[key] = _merge(base[key], value, here)
        else:
            value = _check_value(here, value, base[key])
            merged[key] = float(value) if isinstance(base[key], float) and value is not None else value
    return merged


def merge_config(overrides: dict | None) -> dict:
    cfg = _merge(DEFAULT_CONFIG, overrides or {})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None = None, seed: int | None = None, out_dir: str | None = None) -> dict:
    """Defaults, then the YAML file, then CLI overrides (seed, output dir)."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping of sections, got {type(raw).__name__}")
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw.setdefault("output", {})
        if not isinstance(raw["output"], dict):
            raise ConfigError("output must be a section (mapping)")
        raw["output"]["dir"] = str(out_dir)
    return merge_config(raw)


def validate(cfg: dict) -> None:
    """Range checks not expressible by type; model and training errors surface as ConfigError."""
    if cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']}")
    if cfg["model"]["supply"] not in SUPPLY_PRESETS:
        raise ConfigError(f"model.supply must be one of {SUPPLY_PRESETS}, got {cfg['model']['supply']!r}")
    if cfg["discretization"]["steps"] < 1:
        raise ConfigError(f"discretization.steps must be >= 1, got {cfg['discretization']['steps']}")
    oracle = cfg["oracle"]
    if oracle["ode_refinement"] < 1 or oracle["min_ode_steps"] < 1:
        raise ConfigError("oracle.ode_refinement and oracle.min_ode_steps must be >= 1")
    if oracle["consistency_factor"] <= 0:
        raise ConfigError(f"oracle.consistency_factor must be positive, got {oracle['consistency_factor']}")
    build_model(cfg)
    train_config(cfg)


def build_model(cfg: dict) -> MarketModel:
    m = cfg["model"]
    try:
        return lq_model(
            m["lambda_x"], m["x_ref"], m["lambda_T"],
            initial_mean=m["initial_mean"],
            initial_std=m["initial_std"],
            horizon=m["horizon"],
            initial_supply=m["initial_supply"],
            supply=supply_model(m["supply"], m["supply_reversion"]),
        )
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


def train_config(cfg: dict, **overrides) -> TrainConfig:
    t = cfg["training"]
    fields = dict(
        iterations=t["iterations"],
        epoch_size=t["epoch_size"],
        steps=cfg["discretization"]["steps"],
        n_train=t["n_train"],
        n_test=t["n_test"],
        mc_samples=t["mc_samples"],
        lr_v=t["lr_v"],
        lr_pi=t["lr_pi"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps_adam=t["eps_adam"],
        clip_norm=t["clip_norm"],
        workers=t["workers"],
        seed=cfg["seed"],
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
