"""Perceptual content and style losses over a pluggable feature extractor."""
from __future__ import annotations

import numpy as np
import torch

from arit.errors import DataError

STD_EPS = 1e-12


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """HxWxC array, list of arrays, or a (B, C, H, W) tensor -> (B, C, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.ndim == 4 else images.unsqueeze(0)
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def safe_norm(x: torch.Tensor, dim) -> torch.Tensor:
    """L2 norm whose gradient at exactly zero is zero rather than NaN."""
    sq = (x * x).sum(dim=dim)
    zero = sq == 0  # NaN compares unequal, so it propagates
    return torch.where(zero, torch.zeros_like(sq), torch.where(zero, torch.ones_like(sq), sq).sqrt())


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape[-2:] != b.shape[-2:]:
        raise DataError(f"resolution mismatch: {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}")
    if a.shape[0] != b.shape[0]:
        raise DataError(f"batch size mismatch: {a.shape[0]} vs {b.shape[0]}")


def content_loss(I_g, I_v, fx) -> torch.Tensor:
    """Sum over the batch of ||tau(I_g) - tau(I_v)||_2 on the content layer."""
    a, b = to_batch(I_g), to_batch(I_v)
    _check_pair(a, b)
    fa = fx(a)[fx.content_layer]
    fb = fx(b.to(a.dtype))[fx.content_layer]
    return safe_norm((fa - fb).flatten(1), dim=1).sum()


def channel_stats(feat: torch.Tensor):
    """Per-channel spatial mean and standard deviation of (B, C, H, W) features."""
    flat = feat.flatten(2)
    mu = flat.mean(dim=2)
    var = flat.var(dim=2, unbiased=False)
    return mu, torch.sqrt(var + STD_EPS)


def style_from_features(fg: dict, fn: dict, layers) -> torch.Tensor:
    total = 0.0
    for name in layers:
        mg, sg = channel_stats(fg[name])
        mn, sn = channel_stats(fn[name])
        total = total + safe_norm(mg - mn, dim=1).sum() + safe_norm(sg - sn, dim=1).sum()
    return total


def style_loss(I_g, I_n, fx) -> torch.Tensor:
    """Mean/std feature-statistics distance summed over the style layers."""
    a, b = to_batch(I_g), to_batch(I_n)
    _check_pair(a, b)
    return style_from_features(fx(a), fx(b.to(a.dtype)), fx.style_layers)
