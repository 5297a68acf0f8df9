"""Layered run configuration: defaults < YAML file < environment < command-line overrides."""

from __future__ import annotations

import copy
import os
from dataclasses import fields
from pathlib import Path
from typing import Optional

import yaml

from .data import PhantomSpec
from .downstream import ProbeConfig, SegmentationConfig
from .errors import ConfigError
from .mask import ThresholdPolicy
from .model import DiscriminatorConfig, GeneratorConfig
from .objectives import LossWeights, PatchSamplingConfig
from .training import TrainConfig

ENV_PREFIX = "ANGIOVID_"


def _defaults_of(cls, drop=()):
    out = {}
    for f in fields(cls):
        if f.name in drop:
            continue
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    phantom = _defaults_of(PhantomSpec, drop=("seed", "view", "lesion_count"))
    phantom.update({"n": 8, "views": 1, "lesion_counts": [0, 1], "split_ratios": [50, 25, 25]})
    return {
        "run": {"seed": 0, "out": None},
        "data": {"manifest": None, "resolution": 64, "per_phase": 4, "split": "test"},
        "phantom": phantom,
        "mask": _defaults_of(ThresholdPolicy),
        "model": _defaults_of(GeneratorConfig),
        "discriminator": _defaults_of(DiscriminatorConfig),
        "train": _defaults_of(TrainConfig, drop=("seed", "resolution")),
        "loss": _defaults_of(LossWeights),
        "patches": _defaults_of(PatchSamplingConfig),
        "probe": _defaults_of(ProbeConfig, drop=("seeds",)),
        "segmentation": _defaults_of(SegmentationConfig),
        "metrics": {"extractor_seed": 0, "video_size": 64},
        "downstream": {"checkpoint": None, "grid": None, "compare_random": True, "ks": [1, 5, 10]},
    }


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _merge(base: dict, update: dict, origin: str):
    for section, values in update.items():
        if section not in base:
            raise ConfigError(f"unknown config section {section!r} (from {origin})")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping (from {origin})")
        for key, v in values.items():
            if key not in base[section]:
                raise ConfigError(f"unknown config key {section}.{key} (from {origin})")
            base[section][key] = v


def _set_dotted(tree: dict, dotted: str, value, origin: str):
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key (from {origin})")
    section, key = dotted.split(".", 1)
    _merge(tree, {section: {key: value}}, origin)


def resolve_config(path: Optional[str] = None, env: Optional[dict] = None, overrides=()) -> dict:
    """Merge defaults, a YAML file, ``ANGIOVID_SECTION__KEY`` variables and ``section.key=value`` overrides."""
    cfg = default_config()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {p}: {e}".splitlines()[0]) from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {p} must be a mapping of sections")
        _merge(cfg, loaded, str(p))
    env = os.environ if env is None else env
    for name in sorted(env):
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
            _set_dotted(cfg, f"{section}.{key}", _parse_scalar(env[name]), f"env {name}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k.strip(), _parse_scalar(v), "command line")
    return cfg


def require(cfg: dict, dotted: str):
    section, key = dotted.split(".")
    v = cfg[section][key]
    if v is None or v == "":
        raise ConfigError(f"missing config key {dotted}")
    return v


def write_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def _build(cls, section: dict, **extra):
    try:
        return cls(**{**copy.deepcopy(section), **extra})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def train_config(cfg):
    return _build(TrainConfig, cfg["train"], seed=int(cfg["run"]["seed"]), resolution=int(cfg["data"]["resolution"]))


def generator_config(cfg):
    return _build(GeneratorConfig, cfg["model"])


def discriminator_config(cfg):
    return _build(DiscriminatorConfig, cfg["discriminator"])


def loss_weights(cfg):
    return _build(LossWeights, cfg["loss"])


def patch_config(cfg):
    return _build(PatchSamplingConfig, cfg["patches"])


def threshold_policy(cfg):
    return _build(ThresholdPolicy, cfg["mask"])


def probe_config(cfg, seeds=(0, 1, 2, 3, 4), **extra):
    return _build(ProbeConfig, cfg["probe"], seeds=tuple(seeds), **extra)


def segmentation_config(cfg, **extra):
    return _build(SegmentationConfig, cfg["segmentation"], **extra)


def phantom_spec_kwargs(cfg) -> dict:
    p = dict(cfg["phantom"])
    for k in ("n", "views", "lesion_counts", "split_ratios"):
        p.pop(k)
    return p
