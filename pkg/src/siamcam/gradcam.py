"""Factual and counterfactual Grad-CAM for both branches of a Siamese pair.

Channel weights are the spatially averaged gradients of the model output y
(= d) with respect to the target layer's maps; the map is the rectified
weighted sum of those maps. The counterfactual explanation targets 1 - y,
which only flips the sign of the weights.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ExperimentConfig
from .data import PreparedImage, denormalize_pixels
from .errors import ExplainError
from .model import ForwardTrace, SiameseNetwork, decide, forward_pair, similarity

FACTUAL = "factual"
COUNTERFACTUAL = "counterfactual"
MODES = (FACTUAL, COUNTERFACTUAL)
BRANCHES = ("a", "b")

# fixed so panels are comparable between runs
COLORMAP = "jet"


@dataclass
class NeuronWeights:
    alpha: np.ndarray  # [K]
    mode: str
    branch: str


@dataclass
class Heatmap:
    raw: np.ndarray         # [h', w'] >= 0, feature-map resolution
    normalized: np.ndarray  # [H, W] in [0, 1], input resolution
    mode: str
    branch: str


@dataclass
class ExplanationBundle:
    d: float
    similarity: float
    decision: str
    heatmaps: dict[tuple[str, str], Heatmap]  # keyed by (mode, branch)

    def heatmap(self, mode: str, branch: str) -> Heatmap:
        return self.heatmaps[(mode, branch)]

    def summary(self) -> dict:
        return {"d": self.d, "similarity": self.similarity, "decision": self.decision}


def _target(trace: ForwardTrace, target: str) -> torch.Tensor:
    return trace.logit if target == "logit" else trace.d


def activation_gradients(trace: ForwardTrace, branch: str, target: str = "output") -> torch.Tensor:
    """d(target)/dA for one branch, shape [K, h', w']."""
    if not trace.has_gradients:
        raise ExplainError("no gradient capture", code="no_gradient_capture")
    (grad,) = torch.autograd.grad(_target(trace, target), trace.activations,
                                  retain_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(trace.activations)
    return grad[BRANCHES.index(branch)]


def neuron_weights(trace: ForwardTrace, branch: str = "a", mode: str = FACTUAL,
                   target: str = "output", recompute: bool = False) -> NeuronWeights:
    """alpha_k = mean over (i, j) of d(y)/dA^k_ij; counterfactual uses 1 - y.

    The counterfactual weights are the negated factual ones. ``recompute``
    differentiates 1 - y directly instead, for cross-checking.
    """
    if branch not in BRANCHES or mode not in MODES:
        raise ExplainError(f"bad branch/mode {branch!r}/{mode!r}")
    if mode == COUNTERFACTUAL and recompute:
        if not trace.has_gradients:
            raise ExplainError("no gradient capture", code="no_gradient_capture")
        y = _target(trace, target)
        flipped = -y if target == "logit" else 1.0 - y
        (grad,) = torch.autograd.grad(flipped, trace.activations, retain_graph=True, allow_unused=True)
        grad = torch.zeros_like(trace.activations) if grad is None else grad
        grad = grad[BRANCHES.index(branch)]
        return NeuronWeights(grad.mean(dim=(1, 2)).detach().numpy(), mode, branch)
    alpha = activation_gradients(trace, branch, target).mean(dim=(1, 2)).detach().numpy()
    if mode == COUNTERFACTUAL:
        alpha = -alpha
    return NeuronWeights(alpha, mode, branch)


def gradcam_map(alpha: NeuronWeights | np.ndarray, activations) -> np.ndarray:
    """ReLU(sum_k alpha_k A^k) at feature-map resolution."""
    a = np.asarray(alpha.alpha if isinstance(alpha, NeuronWeights) else alpha)
    acts = activations.detach().numpy() if isinstance(activations, torch.Tensor) else np.asarray(activations)
    if acts.ndim != 3 or a.ndim != 1 or a.shape[0] != acts.shape[0]:
        raise ExplainError(f"channel count mismatch: {a.shape} weights for {acts.shape} maps",
                           code="channel_mismatch")
    return np.maximum(np.einsum("k,kij->ij", a, acts), 0.0)


def upsample(raw: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D map to ``size`` = (H, W)."""
    t = torch.as_tensor(np.ascontiguousarray(raw), dtype=torch.float64)[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; an all-zero map stays zero, a constant one becomes 1."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= 0.0:
        return np.zeros_like(m)
    if hi == lo:
        return np.ones_like(m)
    return (m - lo) / (hi - lo)


def make_heatmap(raw: np.ndarray, size: tuple[int, int], mode: str, branch: str) -> Heatmap:
    return Heatmap(raw, normalize_map(upsample(raw, size)), mode, branch)


def explain_pair(model: SiameseNetwork, a: PreparedImage, b: PreparedImage,
                 config: ExperimentConfig | None = None) -> ExplanationBundle:
    config = config or model.config
    trace = forward_pair(model, a, b, capture=True, layer=config.target_layer)
    size = tuple(config.image_size)
    heatmaps = {}
    for branch in BRANCHES:
        acts = trace.activations_a if branch == "a" else trace.activations_b
        factual = neuron_weights(trace, branch, FACTUAL, target=config.gradcam_target)
        for mode in MODES:
            alpha = factual.alpha if mode == FACTUAL else -factual.alpha
            heatmaps[(mode, branch)] = make_heatmap(gradcam_map(alpha, acts), size, mode, branch)
    d = float(trace.d.detach())
    return ExplanationBundle(d, similarity(d), decide(d, config.threshold), heatmaps)


def colorize(normalized: np.ndarray) -> np.ndarray:
    """Map [0, 1] heat to uint8 RGB through the fixed colormap (256-entry LUT)."""
    from matplotlib import colormaps

    lut = np.rint(colormaps[COLORMAP](np.arange(256))[:, :3] * 255).astype(np.uint8)
    idx = np.clip(np.rint(normalized * 255), 0, 255).astype(np.intp)
    return lut[idx]


def overlay_array(source, heatmap: Heatmap | np.ndarray, alpha_blend: float = 0.5) -> np.ndarray:
    """Blend the colorized heatmap over the un-normalized source image."""
    if isinstance(source, PreparedImage):
        source = denormalize_pixels(source.pixels)
    source = np.asarray(source, dtype=np.uint8)
    heat = heatmap.normalized if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if source.shape[:2] != heat.shape:
        raise ExplainError(f"overlay shape error: image {source.shape[:2]} vs heatmap {heat.shape}",
                           code="overlay_shape")
    if alpha_blend == 0.0:
        return source.copy()
    colored = colorize(heat)
    if alpha_blend == 1.0:
        return colored
    mixed = (1.0 - alpha_blend) * source.astype(np.float64) + alpha_blend * colored.astype(np.float64)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def overlay(source, heatmap: Heatmap | np.ndarray, alpha_blend: float = 0.5) -> bytes:
    """PNG bytes of :func:`overlay_array`."""
    buf = io.BytesIO()
    Image.fromarray(overlay_array(source, heatmap, alpha_blend), "RGB").save(buf, format="PNG")
    return buf.getvalue()
