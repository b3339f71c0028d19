"""Shared-weight Siamese network with a scalar distance head.

    d = sigmoid(w * ||tower(a) - tower(b)||_2 + c)

``tower`` is backbone -> global average pool -> Linear(embedding_dim) -> ReLU.
Both branches run through the same ``tower`` module, so weight sharing is by
identity. ``d`` near 0 means similar; the similarity score is ``1 - d``.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, config_from_mapping
from .data import PreparedImage
from .errors import ModelError

CHECKPOINT_FORMAT = "siamcam-checkpoint"
CHECKPOINT_VERSION = 1

SAME_CLASS = "same_class"
DIFFERENT_CLASS = "different_class"

# d(a, a) = sigmoid(head_bias); starting below 0 puts identical inputs on the
# same-class side of the 0.5 threshold. A scalar moves only ~lr per Adam step,
# so a zero start leaves every similar pair near d = 0.5 for many epochs.
HEAD_BIAS_INIT = -2.0


def small_cnn() -> nn.Sequential:
    """Four conv blocks (3x3 conv, batch norm, ReLU); 2x2 max-pool after the
    first three. A 64x64 input gives 128 maps of 8x8 at ``block4``."""
    widths = [3, 16, 32, 64, 128]
    blocks = OrderedDict()
    for i in range(4):
        layers = [nn.Conv2d(widths[i], widths[i + 1], 3, padding=1, bias=False),
                  nn.BatchNorm2d(widths[i + 1]),
                  nn.ReLU(inplace=False)]
        if i < 3:
            layers.append(nn.MaxPool2d(2))
        blocks[f"block{i + 1}"] = nn.Sequential(*layers)
    return nn.Sequential(blocks)


def resnet50_backbone(weights_path: str | None = None) -> nn.Sequential:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if weights_path is not None:
        path = Path(weights_path)
        if not path.is_file():
            raise ModelError(f"file not found: {path}", code="file_not_found")
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, _ = net.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("fc.")]
        if missing:
            raise ModelError(f"pretrained weights missing {len(missing)} backbone tensors",
                             code="incompatible_weights")
    children = [(name, m) for name, m in net.named_children() if name not in ("avgpool", "fc")]
    return nn.Sequential(OrderedDict(children))


def backbone_channels(backbone: nn.Sequential) -> int:
    for m in reversed(list(backbone.modules())):
        if isinstance(m, nn.Conv2d):
            return m.out_channels
    raise ModelError("backbone has no convolution")


class EmbeddingNetwork(nn.Module):
    def __init__(self, backbone: nn.Sequential, embedding_dim: int):
        super().__init__()
        self.backbone = backbone
        self.pool = nn.AdaptiveAvgPool2d((1, 1))
        self.projection = nn.Linear(backbone_channels(backbone), embedding_dim)
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.backbone(x)).flatten(1)
        return self.relu(self.projection(x))


class SiameseNetwork(nn.Module):
    def __init__(self, tower: EmbeddingNetwork, config: ExperimentConfig):
        super().__init__()
        self.tower = tower
        self.head_weight = nn.Parameter(torch.tensor(1.0))
        self.head_bias = nn.Parameter(torch.tensor(HEAD_BIAS_INIT))
        self.config = config

    def embed_pair(self, a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # one pass over the concatenated batch: batch-norm sees both branches
        e = self.tower(torch.cat([a, b], dim=0))
        return e[: len(a)], e[len(a):]

    @staticmethod
    def distance(e_a: torch.Tensor, e_b: torch.Tensor) -> torch.Tensor:
        return torch.linalg.vector_norm(e_a - e_b, dim=1)

    def head_logit(self, dist: torch.Tensor) -> torch.Tensor:
        return self.head_weight * dist + self.head_bias

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        e_a, e_b = self.embed_pair(a, b)
        return torch.sigmoid(self.head_logit(self.distance(e_a, e_b)))

    def layer(self, name: str) -> nn.Module:
        try:
            return self.tower.backbone.get_submodule(name)
        except AttributeError:
            raise ModelError(f"unknown layer {name}", code="unknown_layer") from None

    @contextlib.contextmanager
    def substitute_activations(self, layer_name: str, fn: Callable[[torch.Tensor], torch.Tensor]):
        """Replace ``layer_name``'s output by ``fn(output)`` inside the block."""
        handle = self.layer(layer_name).register_forward_hook(lambda _m, _i, out: fn(out))
        try:
            yield
        finally:
            handle.remove()


@dataclass
class ForwardTrace:
    d: torch.Tensor             # scalar
    logit: torch.Tensor         # scalar, pre-sigmoid
    distance: torch.Tensor      # scalar L2 distance
    embedding_a: torch.Tensor
    embedding_b: torch.Tensor
    activations: torch.Tensor | None  # [2, K, h, w]; row 0 is branch a
    layer: str | None

    @property
    def activations_a(self) -> torch.Tensor | None:
        return None if self.activations is None else self.activations[0]

    @property
    def activations_b(self) -> torch.Tensor | None:
        return None if self.activations is None else self.activations[1]

    @property
    def has_gradients(self) -> bool:
        return self.activations is not None and self.d.requires_grad


def build_model(config: ExperimentConfig, load_pretrained: bool = True,
                seed: int | None = None) -> SiameseNetwork:
    """Fresh model. With ``seed`` the initial parameters depend on nothing else;
    without it they come from the global torch RNG."""
    with torch.random.fork_rng(enabled=seed is not None):
        if seed is not None:
            torch.manual_seed(seed)
        if config.backbone_id == "small-cnn":
            backbone = small_cnn()
        else:
            backbone = resnet50_backbone(config.pretrained_weights if load_pretrained else None)
        model = SiameseNetwork(EmbeddingNetwork(backbone, config.embedding_dim), config)
    model.layer(config.target_layer)
    return model


def as_batch(image: PreparedImage | np.ndarray | torch.Tensor, model: SiameseNetwork) -> torch.Tensor:
    pixels = image.pixels if isinstance(image, PreparedImage) else image
    x = torch.as_tensor(np.asarray(pixels) if not isinstance(pixels, torch.Tensor) else pixels)
    h, w = model.config.image_size
    if x.dim() != 3 or tuple(x.shape) != (3, h, w):
        raise ModelError(f"input shape error: expected (3, {h}, {w}), got {tuple(x.shape)}",
                         code="input_shape")
    dtype = next(model.parameters()).dtype
    return x.to(dtype).unsqueeze(0)


@torch.no_grad()
def embed(model: SiameseNetwork, image: PreparedImage) -> np.ndarray:
    model.eval()
    return model.tower(as_batch(image, model))[0].numpy()


def forward_pair(model: SiameseNetwork, a: PreparedImage, b: PreparedImage,
                 capture: bool = False, layer: str | None = None) -> ForwardTrace:
    """Single-pair forward in inference mode.

    With ``capture`` the target layer's activations of both branches are kept
    in the autograd graph, so ``d`` can be differentiated with respect to them.
    """
    model.eval()
    xa, xb = as_batch(a, model), as_batch(b, model)
    if not capture:
        with torch.no_grad():
            e_a, e_b = model.embed_pair(xa, xb)
            dist = model.distance(e_a, e_b)
            logit = model.head_logit(dist)
            return ForwardTrace(torch.sigmoid(logit)[0], logit[0], dist[0], e_a[0], e_b[0], None, None)

    layer = layer or model.config.target_layer
    module = model.layer(layer)
    store: dict[str, torch.Tensor] = {}

    def hook(_m, _i, out):
        store["acts"] = out

    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            e_a, e_b = model.embed_pair(xa, xb)
            dist = model.distance(e_a, e_b)
            logit = model.head_logit(dist)
            d = torch.sigmoid(logit)
    finally:
        handle.remove()
    return ForwardTrace(d[0], logit[0], dist[0], e_a[0], e_b[0], store["acts"], layer)


def similarity(d: float) -> float:
    return 1.0 - d


def decide(d: float, threshold: float = 0.5) -> str:
    """``same_class`` iff d < threshold (ties go to ``different_class``)."""
    return SAME_CLASS if d < threshold else DIFFERENT_CLASS


def save_model(model: SiameseNetwork, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
    }, path)


def load_model(path: str | Path, config: ExperimentConfig | None = None) -> SiameseNetwork:
    """Load a checkpoint. If ``config`` is given its architecture must match."""
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"file not found: {path}", code="file_not_found")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ModelError(f"incompatible checkpoint: {path}", code="incompatible_checkpoint") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT \
            or blob.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"incompatible checkpoint: {path}", code="incompatible_checkpoint")
    saved = config_from_mapping(blob["config"])
    if config is not None:
        for key in ("backbone_id", "embedding_dim"):
            if getattr(config, key) != getattr(saved, key):
                raise ModelError(f"incompatible checkpoint: {key} is {getattr(saved, key)}, "
                                 f"configured {getattr(config, key)}", code="incompatible_checkpoint")
    model = build_model(saved, load_pretrained=False)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise ModelError(f"incompatible checkpoint: {path}", code="incompatible_checkpoint") from exc
    model.eval()
    return model
