"""Run configuration: a nested key-value document with profile presets.

Precedence is CLI flag > config file > profile preset > built-in default.
Unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .discriminator import DiscriminatorConfig
from .errors import ConfigError, NotFoundError
from .generator import GeneratorConfig
from .losses import PRESETS, LossWeights
from .perceptual import ExtractorConfig
from .trainer import TrainConfig

PROFILES = ("full", "desk")


def default_document() -> dict:
    train = TrainConfig().to_dict()
    train.pop("seed")
    return {
        "seed": 0,
        "profile": "full",
        "data": {"hq_subdir": "hq", "cataract_subdir": "cataract", "fold": None},
        "train": train,
        "syn": {
            "generator": GeneratorConfig(stages=3, width=16).to_dict(),
            "discriminator": DiscriminatorConfig(embed_dim=16).to_dict(),
            "loss": PRESETS["syn"].to_dict(),
            "train": {},
        },
        "res": {
            "generator": GeneratorConfig(stages=4, width=32).to_dict(),
            "discriminator": DiscriminatorConfig(embed_dim=32).to_dict(),
            "loss": PRESETS["res"].to_dict(),
            "train": {},
        },
        "perceptual": {
            "epochs": 5,
            "image_size": 224,
            "lr": 1e-3,
            "extractor": ExtractorConfig().to_dict(),
        },
    }


_DESK_DISC = {"stages": 3, "embed_dim": 16, "window": 4, "heads_per_stage": [1, 2, 4]}

# CPU-sized run of the whole pipeline: small models, 64 px patches from 128 px images
DESK_OVERRIDES = {
    "train": {
        "batch": 4,
        "patch": 64,
        "resize": 128,
        "lr_base": 2e-3,
        "lr_finetune": 2e-4,
        "iterations": 1000,
        "finetune_iterations": 100,
        "warmup_iters": 50,
        "checkpoint_every": 250,
        "validate_every": 250,
    },
    "syn": {
        "generator": {"stages": 2, "width": 8},
        "discriminator": _DESK_DISC,
        "train": {"iterations": 400},
    },
    "res": {
        "generator": {"stages": 2, "width": 8},
        "discriminator": _DESK_DISC,
        "train": {"iterations": 800},
    },
    "perceptual": {"image_size": 64},
}

# keys whose values are free-form override maps rather than fixed schemas
_OPEN_KEYS = {("syn", "train"), ("res", "train")}


def deep_merge(base: dict, override: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = path + (key,)
        if path in _OPEN_KEYS:
            train_keys = set(TrainConfig().to_dict()) - {"seed"}
            if key not in train_keys:
                raise ConfigError(f"unknown config key: {'.'.join(where)}")
            out[key] = value
            continue
        if key not in base:
            raise ConfigError(f"unknown config key: {'.'.join(where)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(where)} must be a mapping")
            out[key] = deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_document(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"no such config file: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return doc


def resolve(config_path=None, profile: str | None = None, overrides: dict | None = None) -> dict:
    file_doc = load_document(config_path) if config_path else {}
    profile = profile or file_doc.get("profile") or "full"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    doc = default_document()
    if profile == "desk":
        doc = deep_merge(doc, DESK_OVERRIDES)
    doc = deep_merge(doc, file_doc)
    doc = deep_merge(doc, overrides or {})
    doc["profile"] = profile
    return doc


def dump_document(doc: dict, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")
    return path


def train_config(doc: dict, phase: str) -> TrainConfig:
    d = dict(doc["train"])
    d.update(doc[phase]["train"])
    d["seed"] = doc["seed"]
    return TrainConfig.from_dict(d)


def generator_config(doc: dict, phase: str) -> GeneratorConfig:
    return GeneratorConfig.from_dict(doc[phase]["generator"])


def discriminator_config(doc: dict, phase: str) -> DiscriminatorConfig:
    return DiscriminatorConfig.from_dict(doc[phase]["discriminator"])


def loss_weights(doc: dict, phase: str) -> LossWeights:
    return LossWeights.from_dict(doc[phase]["loss"])


def extractor_config(doc: dict) -> ExtractorConfig:
    return ExtractorConfig.from_dict(doc["perceptual"]["extractor"])
