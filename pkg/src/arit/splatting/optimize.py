"""Color-only fine-tuning of a gaussian cloud under perceptual losses."""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import torch

from arit.errors import DataError, NumericError
from arit.splatting.gaussians import GaussianCloud
from arit.splatting.losses import safe_norm, style_from_features, to_batch
from arit.splatting.render import RenderConfig, SparseWeights, composite, render

log = logging.getLogger(__name__)


def stacked_weights(cloud: GaussianCloud, poses, cfg: RenderConfig) -> sp.csr_matrix:
    """Vertically stacked (F*H*W, N) compositing weights for several views."""
    return sp.vstack([render(cloud, pose, cfg).weights for pose in poses]).tocsr()


class ColorObjective:
    """Sum over frames of content loss plus weighted style loss, as a function
    of the colors. Target features are extracted once."""

    def __init__(self, weights, targets, refs, fx, style_weight: float, height: int, width: int):
        self.weights, self.fx, self.style_weight = weights, fx, style_weight
        self.height, self.width = height, width
        with torch.no_grad():
            self.target_content = fx(targets)[fx.content_layer]
            self.ref_feats = fx(refs) if style_weight else None

    def __call__(self, colors: torch.Tensor) -> torch.Tensor:
        rendered = composite(self.weights, colors, self.height, self.width)
        feats = self.fx(rendered)
        diff = feats[self.fx.content_layer] - self.target_content.to(colors.dtype)
        loss = safe_norm(diff.flatten(1), dim=1).sum()
        if self.style_weight:
            ref = {k: v.to(colors.dtype) for k, v in self.ref_feats.items()}
            loss = loss + self.style_weight * style_from_features(feats, ref, self.fx.style_layers)
        return loss


def optimize_colors(
    cloud: GaussianCloud,
    virtual_frames,
    real_refs,
    fx,
    steps: int = 200,
    step_size: float = 0.05,
    style_weight: float = 1.0,
    cfg: RenderConfig | None = None,
    dtype=torch.float32,
    history: list | None = None,
) -> GaussianCloud:
    """Gradient descent on the colors only; geometry and opacities are untouched.

    ``virtual_frames`` is a list of (image, pose) pairs and ``real_refs`` the
    matching style references. Colors are clipped to [0, 1] after each step.
    """
    if steps < 0:
        raise DataError("steps must be >= 0")
    if steps == 0:
        return cloud.with_colors(cloud.colors)
    if cfg is None:
        raise DataError("optimize_colors needs a RenderConfig")
    virtual_frames = list(virtual_frames)
    real_refs = list(real_refs)
    if len(real_refs) != len(virtual_frames):
        raise DataError("need one style reference per virtual frame")

    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    weights = SparseWeights(stacked_weights(cloud, [p for _, p in virtual_frames], cfg), np_dtype)
    targets = to_batch([img for img, _ in virtual_frames], dtype)
    refs = to_batch(real_refs, dtype)
    objective = ColorObjective(weights, targets, refs, fx, style_weight, cfg.height, cfg.width)
    colors = torch.tensor(np.clip(cloud.colors, 0.0, 1.0), dtype=dtype)

    for step in range(steps):
        colors.requires_grad_(True)
        loss = objective(colors)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite color loss at step {step}: {loss.item()}")
        (grad,) = torch.autograd.grad(loss, colors)
        if history is not None:
            history.append(loss.item())
        with torch.no_grad():
            colors = (colors - step_size * grad).clamp_(0.0, 1.0)
    return cloud.with_colors(colors.detach().double().numpy())
