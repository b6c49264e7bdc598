"""Per-branch gradient-weighted class activation maps and overlay rendering.

Each branch exposes its last pre-pool activation map; the graft sub-network
exposes the output of its final graft block. The map for a target class is
the ReLU of the channel sum weighted by the spatial mean of the class
score's gradient, normalized by its maximum (left all-zero when the
pre-normalization maximum is zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import ImageRecord, _normalize
from .errors import ClassOutOfRangeError, UnknownBranchError
from .model import BRANCH_NAMES, EngrafNet

__all__ = [
    "Heatmap",
    "cam_map",
    "grad_cam",
    "render_overlay",
    "DEFAULT_HEAD_FOR_BRANCH",
]

# the head whose score usually drives each branch's map
DEFAULT_HEAD_FOR_BRANCH = {
    "fine": "z1",
    "coarse": "z2",
    "graft-main": "z3",
    "graft-sub": "z4",
}


@dataclass
class Heatmap:
    """Normalized spatial attention map in [0, 1]."""

    values: np.ndarray  # (h, w) float32
    source_branch: str
    target_class: int
    target_head: str


def cam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """The map arithmetic on raw (C, h, w) arrays.

    weights = spatial mean of gradients per channel; the map is the ReLU of
    the weighted channel sum, scaled so its maximum is 1 (all-zero maps are
    returned untouched, no division happens).
    """
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    peak = cam.max() if cam.size else 0.0
    if peak > 0.0:
        cam = cam / peak
    return cam.astype(np.float32)


def grad_cam(model: EngrafNet, image: torch.Tensor, branch: str, head: str,
             target_class: int) -> Heatmap:
    """Compute the attention map of one branch for one class score.

    ``image`` is a normalized (1, 3, H, W) tensor; ``head`` is the logit
    head (z0..z4) whose ``target_class`` score is differentiated against
    the branch's retained activation.
    """
    if branch not in BRANCH_NAMES:
        raise UnknownBranchError(f"unknown branch {branch!r}; choose from {BRANCH_NAMES}")
    model.eval()
    with torch.enable_grad():
        logits, feats = model(image, return_features=True)
        if branch not in feats.activations:
            raise UnknownBranchError(
                f"variant {model.config.variant!r} has no {branch!r} branch")
        present = logits.present()
        if head not in present:
            raise UnknownBranchError(
                f"variant {model.config.variant!r} has no head {head!r}")
        scores = present[head]
        if not 0 <= target_class < scores.shape[1]:
            raise ClassOutOfRangeError(
                f"class {target_class} out of range for head {head} "
                f"({scores.shape[1]} classes)")
        activation = feats.activations[branch]
        grads = torch.autograd.grad(scores[0, target_class], activation,
                                    allow_unused=True)[0]
    if grads is None:
        # score does not depend on this activation (e.g. fine branch vs z4)
        grads = torch.zeros_like(activation)
    values = cam_map(activation[0].detach().cpu().numpy(),
                     grads[0].detach().cpu().numpy())
    return Heatmap(values=values, source_branch=branch,
                   target_class=target_class, target_head=head)


def normalized_input(record: ImageRecord) -> torch.Tensor:
    """Record pixels as a (1, 3, H, W) eval-normalized tensor."""
    return torch.from_numpy(_normalize(record.pixels)).unsqueeze(0)


# piecewise-linear blue->cyan->yellow->red colormap anchors
_CMAP_ANCHORS = np.array([
    [0.0, 0.0, 0.5],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.5, 0.0, 0.0],
], dtype=np.float64)


def _colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] scalars to (..., 3) RGB floats in [0,1]."""
    pos = np.clip(values, 0.0, 1.0) * (len(_CMAP_ANCHORS) - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, len(_CMAP_ANCHORS) - 1)
    frac = (pos - lo)[..., None]
    return _CMAP_ANCHORS[lo] * (1.0 - frac) + _CMAP_ANCHORS[hi] * frac


def render_overlay(heatmap: Heatmap, record: ImageRecord, alpha: float,
                   out_path) -> None:
    """Alpha-blend the (bilinearly upsampled) colored map over the image
    and write a PNG with the image's dimensions."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    img = record.pixels.astype(np.float64) / 255.0  # (3, H, W)
    h, w = img.shape[1], img.shape[2]
    values = torch.from_numpy(heatmap.values)[None, None, :, :]
    up = F.interpolate(values, size=(h, w), mode="bilinear",
                       align_corners=False)[0, 0].numpy()
    colored = _colormap(up)  # (H, W, 3)
    base = img.transpose(1, 2, 0)
    blended = (1.0 - alpha) * base + alpha * colored
    out = np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(out, mode="RGB").save(out_path, format="PNG")
