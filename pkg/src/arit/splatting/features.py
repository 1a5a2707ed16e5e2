"""Pluggable feature extractors.

The default is a fixed random convolutional stack: four stride-2 3x3 stages
with seeded normal weights (scaled by 1/sqrt(fan_in) so activations keep a
unit-order magnitude) and an absolute-value nonlinearity. It needs no
downloaded weights and is bit-reproducible on a given machine.
"""
from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class FeatureExtractor(Protocol):
    layer_ids: Sequence[str]
    content_layer: str
    style_layers: Sequence[str]

    def __call__(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """(B, C, H, W) images in [0, 1] -> {layer id: (B, C_l, H_l, W_l)}."""
        ...


class SeededConvExtractor(nn.Module):
    def __init__(self, channels=(16, 32, 64, 96), seed: int = 0, in_channels: int = 3, smoothing: float = 0.0):
        super().__init__()
        self.seed = seed
        # smoothing > 0 replaces |x| by sqrt(x^2 + smoothing^2), which is C^1
        self.smoothing = float(smoothing)
        self.channels = tuple(channels)
        self.layer_ids = tuple(f"stage{i + 1}" for i in range(len(channels)))
        self.content_layer = "stage3"
        self.style_layers = ("stage1", "stage2", "stage3")
        gen = torch.Generator().manual_seed(seed)
        c_in = in_channels
        for i, c_out in enumerate(self.channels):
            w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64)
            w = w / np.sqrt(c_in * 9)
            self.register_buffer(f"w{i}", w.float())
            c_in = c_out
        self.in_channels = in_channels

    @property
    def weights(self):
        return [getattr(self, f"w{i}") for i in range(len(self.channels))]

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        x = images
        if x.shape[1] == 1 and self.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        x = x - 0.5
        out = {}
        for name, w in zip(self.layer_ids, self.weights):
            x = F.conv2d(x, w.to(x.dtype), stride=2, padding=1)
            x = torch.sqrt(x * x + self.smoothing**2) if self.smoothing else torch.abs(x)
            out[name] = x
        return out


class ConvEmbedder:
    """Global-average-pooled features of stages 2-4 of a seeded extractor (d = 192)."""

    def __init__(self, extractor: SeededConvExtractor | None = None, layers=("stage2", "stage3", "stage4")):
        self.extractor = extractor or SeededConvExtractor()
        self.layers = tuple(layers)
        self.id = f"seeded-conv:{','.join(map(str, self.extractor.channels))}:seed{self.extractor.seed}"

    @property
    def dim(self) -> int:
        idx = {name: c for name, c in zip(self.extractor.layer_ids, self.extractor.channels)}
        return sum(idx[name] for name in self.layers)

    @torch.no_grad()
    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        """List/array of HxWxC images -> (n, d) float64 embeddings."""
        images = list(images)
        if not images:
            return np.zeros((0, self.dim))
        out = []
        for start in range(0, len(images), batch_size):
            chunk = np.stack([np.asarray(im, dtype=np.float32) for im in images[start : start + batch_size]])
            x = torch.from_numpy(chunk).permute(0, 3, 1, 2).contiguous()
            feats = self.extractor(x)
            pooled = [feats[name].mean(dim=(2, 3)) for name in self.layers]
            out.append(torch.cat(pooled, dim=1).double().numpy())
        return np.concatenate(out, axis=0)

    __call__ = embed


_DEFAULT: SeededConvExtractor | None = None


def default_extractor() -> SeededConvExtractor:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = SeededConvExtractor()
    return _DEFAULT


def default_embedder() -> ConvEmbedder:
    return ConvEmbedder(default_extractor())
