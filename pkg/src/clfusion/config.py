"""Layered run configuration: built-in preset < config file < overrides.

A config file is YAML (JSON also parses) with these sections, all optional::

    preset: desk                 # desk | desk64 | full
    prior:    {latent_dim, embed_dim, param_kind, depth, width, heads,
               cond_dropout_prob, extended_latent}
    schedule: {kind, T, beta_start, beta_end}
    loss:     {lambda_diff, lambda_contrast, margin}
    train:    {iterations, learning_rate, n_id, k, seed, l2_enabled,
               triplet_enabled, log_interval, checkpoint_interval,
               pseudo_text_xi, pseudo_text_fraction, grad_clip, dtype}
    data:     {world_seed, n_identities, n_heldout, k, seed, heldout_seed,
               noise_scale, pose_scale}
    sample:   {guidance_scale, variance, clamp_w0}
    eval:     {n_probes, seeds, variants, guidance_scale}

Overrides are ``key=value`` strings; ``key`` is either ``section.name`` or
a bare ``name`` that occurs in exactly one section.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .losses import LossWeights
from .network import PRESETS as PRIOR_PRESETS
from .network import PriorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_BASE = {
    "prior": dict(PRIOR_PRESETS["desk"], param_kind="predict_w0", cond_dropout_prob=0.1, extended_latent=None),
    "schedule": {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "loss": {"lambda_diff": 1.0, "lambda_contrast": 1.0, "margin": 0.5},
    "train": {
        "iterations": 2000,
        "learning_rate": 1e-3,
        "n_id": 16,
        "k": 4,
        "seed": 0,
        "l2_enabled": True,
        "triplet_enabled": True,
        "log_interval": 1,
        "checkpoint_interval": 500,
        "pseudo_text_xi": 0.1,
        "pseudo_text_fraction": 0.5,
        "grad_clip": None,
        "dtype": "float32",
    },
    "data": {
        "world_seed": 0,
        "n_identities": 512,
        "n_heldout": 64,
        "k": 4,
        "seed": 1,
        "heldout_seed": 2,
        "noise_scale": 0.05,
        "pose_scale": 4.0,
    },
    "sample": {"guidance_scale": 3.0, "variance": "posterior", "clamp_w0": None},
    "eval": {
        "n_probes": 256,
        "seeds": [0],
        "variants": ["full", "eps", "no_l2", "no_tri", "no_contrast"],
        "guidance_scale": 1.0,
    },
}

PRESETS = {
    "desk": {},
    "desk64": {"train": {"n_id": 64}, "data": {"n_identities": 2048}},
    "full": {
        "prior": dict(PRIOR_PRESETS["full"]),
        "train": {"iterations": 1_000_000, "learning_rate": 1e-4, "n_id": 64, "k": 8, "checkpoint_interval": 10_000, "log_interval": 100},
        "data": {"n_identities": 100_000, "k": 8},
    },
}


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be a mapping")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def preset(name: str = "desk") -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(_BASE)
    _merge(cfg, copy.deepcopy(PRESETS[name]))
    cfg["preset"] = name
    return cfg


def parse_override(text: str, cfg: dict) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key!r}: cannot parse value {raw!r}") from exc
    if "." in key:
        path = key.split(".")
    else:
        owners = [s for s, body in cfg.items() if isinstance(body, dict) and key in body]
        if len(owners) != 1:
            raise ConfigError(
                f"override key {key!r} is " + ("unknown" if not owners else f"ambiguous ({owners})")
            )
        path = [owners[0], key]
    return path, value


def load_config(path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> dict:
    """Effective configuration dictionary."""
    file_cfg = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    cfg = preset(file_cfg.pop("preset", "desk"))
    _merge(cfg, file_cfg)
    for text in overrides:
        keys, value = parse_override(text, cfg)
        _merge(cfg, _nest(keys, value))
    validate(cfg)
    return cfg


def _nest(keys: list[str], value) -> dict:
    out = value
    for key in reversed(keys):
        out = {key: out}
    return out


def validate(cfg: dict) -> None:
    try:
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    return TrainConfig(
        weights=LossWeights(**cfg["loss"]),
        prior=PriorConfig(**cfg["prior"], num_timesteps=cfg["schedule"]["T"]),
        schedule=dict(cfg["schedule"]),
        **t,
    )
