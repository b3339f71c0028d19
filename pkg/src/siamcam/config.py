"""Experiment configuration and seeding.

The config file is a flat ``key: value`` YAML mapping. Every key is optional;
missing keys take the defaults below and unknown keys are rejected.

    dataset_root: data/flowers
    image_size: [224, 224]      # or a single int for square inputs
    train_fraction: 0.8
    val_fraction_of_train: 0.1
    seed: 0
    backbone_id: small-cnn      # or resnet50
    pretrained_weights: null    # local state-dict file for resnet50
    embedding_dim: 256
    margin: 2.0
    threshold: 0.5
    epochs: 20
    batch_size: 32
    learning_rate: null         # 1e-4 for resnet50, 1e-3 for small-cnn
    target_layer: null          # last conv block of the backbone
    loss_on: output             # or embedding_distance
    freeze_backbone: false
    grad_clip: null
    gradcam_target: output      # or logit
    crop_similarity_gate: 0.8
    bbox_fraction: 0.15
    min_box_fraction: 0.1
    overlay_alpha: 0.5
"""
from __future__ import annotations

import dataclasses
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import ConfigError

CONFIG_ENV_VAR = "SIAMCAM_CONFIG"

BACKBONES = ("small-cnn", "resnet50")
DEFAULT_LR = {"small-cnn": 1e-3, "resnet50": 1e-4}
DEFAULT_TARGET_LAYER = {"small-cnn": "block4", "resnet50": "layer4"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_root: str | None = None
    image_size: tuple[int, int] = (224, 224)
    train_fraction: float = 0.8
    val_fraction_of_train: float = 0.1
    seed: int = 0
    backbone_id: str = "small-cnn"
    pretrained_weights: str | None = None
    embedding_dim: int = 256
    margin: float = 2.0
    threshold: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float | None = None
    target_layer: str | None = None
    loss_on: str = "output"
    freeze_backbone: bool = False
    grad_clip: float | None = None
    gradcam_target: str = "output"
    crop_similarity_gate: float = 0.8
    bbox_fraction: float = 0.15
    min_box_fraction: float = 0.1
    overlay_alpha: float = 0.5
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        # normalise image_size so "64", [64] and (64, 64) all mean the same
        size = self.image_size
        if isinstance(size, (int, float)):
            size = (int(size), int(size))
        try:
            size = tuple(int(s) for s in size)
        except (TypeError, ValueError):
            raise ConfigError("invalid config: image_size", code="invalid_config")
        if len(size) == 1:
            size = (size[0], size[0])
        object.__setattr__(self, "image_size", size)
        if self.learning_rate is None and self.backbone_id in DEFAULT_LR:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.backbone_id])
        if self.target_layer is None and self.backbone_id in DEFAULT_TARGET_LAYER:
            object.__setattr__(self, "target_layer", DEFAULT_TARGET_LAYER[self.backbone_id])
        self.validate()

    def validate(self) -> None:
        checks = [
            ("image_size", len(self.image_size) == 2 and min(self.image_size) >= 8),
            ("train_fraction", 0.0 < self.train_fraction < 1.0),
            ("val_fraction_of_train", 0.0 <= self.val_fraction_of_train < 1.0),
            ("threshold", 0.0 < self.threshold < 1.0),
            ("margin", self.margin >= 0.0),
            ("embedding_dim", self.embedding_dim > 0),
            ("backbone_id", self.backbone_id in BACKBONES),
            ("epochs", self.epochs >= 0),
            ("batch_size", self.batch_size > 0),
            ("learning_rate", self.learning_rate is not None and self.learning_rate >= 0.0),
            ("loss_on", self.loss_on in ("output", "embedding_distance")),
            ("gradcam_target", self.gradcam_target in ("output", "logit")),
            ("grad_clip", self.grad_clip is None or self.grad_clip > 0),
            ("crop_similarity_gate", 0.0 <= self.crop_similarity_gate < 1.0),
            ("bbox_fraction", 0.0 < self.bbox_fraction < 1.0),
            ("min_box_fraction", 0.0 < self.min_box_fraction <= 1.0),
            ("overlay_alpha", 0.0 <= self.overlay_alpha <= 1.0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid config: {name}", code="invalid_config")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "extra")


def config_from_mapping(values: Mapping[str, Any] | None) -> ExperimentConfig:
    values = dict(values or {})
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"invalid config: unknown key {unknown[0]}", code="invalid_config")
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}", code="invalid_config") from exc


def load_config(path: str | os.PathLike | None = None,
                overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a config file, apply ``overrides`` (non-None values win) and validate.

    ``path=None`` falls back to ``$SIAMCAM_CONFIG``; if that is unset too the
    file layer is empty and only defaults and overrides apply.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}", code="config_not_found")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {path}", code="malformed_config") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict) or any(isinstance(v, dict) for v in loaded.values()):
            raise ConfigError(f"malformed config: {path}", code="malformed_config")
        values.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return config_from_mapping(values)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(config))


def seed_everything(seed: int) -> None:
    import torch

    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
