"""Generators, patch discriminators and projection heads."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from arit.errors import DataError


# "gelu" is a smooth stand-in used where finite differences must not cross kinks
ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 32
    n_downsamples: int = 2
    n_residual_blocks: int = 4
    norm: str = "instance"
    stem_kernel: int = 7
    in_channels: int = 3
    out_channels: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.norm not in ("instance", "none"):
            raise DataError(f"unknown norm {self.norm!r}")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        if self.stem_kernel % 2 != 1:
            raise DataError("stem kernel must be odd")

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2**self.n_downsamples

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 32
    n_layers: int = 3
    norm: str = "instance"
    in_channels: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.norm not in ("instance", "none"):
            raise DataError(f"unknown norm {self.norm!r}")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _norm(kind: str, channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels) if kind == "instance" else nn.Identity()


def _act(kind: str, leaky: bool = False) -> nn.Module:
    if kind == "gelu":
        return nn.GELU()
    return nn.LeakyReLU(0.2) if leaky else nn.ReLU()


class ResidualBlock(nn.Module):
    """x + conv(relu(norm(conv(x)))); the second conv starts at zero so the
    untrained block is exactly the identity."""

    def __init__(self, channels: int, norm: str, activation: str = "relu"):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(norm, channels),
            _act(activation),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder (stem, strided downsampling, residual trunk) and decoder
    (nearest upsampling + conv, tanh). Images are [0, 1] at the interface."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        pad = spec.stem_kernel // 2
        enc = [nn.ReflectionPad2d(pad), nn.Conv2d(spec.in_channels, c, spec.stem_kernel), _norm(spec.norm, c), _act(spec.activation)]
        for _ in range(spec.n_downsamples):
            enc += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), _norm(spec.norm, 2 * c), _act(spec.activation)]
            c *= 2
        enc += [ResidualBlock(c, spec.norm, spec.activation) for _ in range(spec.n_residual_blocks)]
        self.encoder = nn.Sequential(*enc)
        dec = []
        for _ in range(spec.n_downsamples):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c // 2, 3, padding=1),
                _norm(spec.norm, c // 2),
                _act(spec.activation),
            ]
            c //= 2
        dec += [nn.ReflectionPad2d(pad), nn.Conv2d(c, spec.out_channels, spec.stem_kernel), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def check_input(self, x: torch.Tensor):
        factor = 2**self.spec.n_downsamples
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise DataError(f"resolution {tuple(x.shape[-2:])} not divisible by {factor}")

    def encode(self, x01: torch.Tensor) -> torch.Tensor:
        self.check_input(x01)
        return self.encoder(x01 * 2.0 - 1.0)

    def decode(self, feat: torch.Tensor) -> torch.Tensor:
        return (self.decoder(feat) + 1.0) * 0.5

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x01))

    def forward_with_features(self, x01: torch.Tensor):
        feat = self.encode(x01)
        return self.decode(feat), feat


class Discriminator(nn.Module):
    """PatchGAN: a map of logits, one per receptive-field patch.

    ``forward`` returns logits; ``scores`` squashes them to (0, 1)."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        layers = [nn.Conv2d(spec.in_channels, c, 4, stride=2, padding=1), _act(spec.activation, leaky=True)]
        for _ in range(1, spec.n_layers):
            layers += [nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), _norm(spec.norm, 2 * c), _act(spec.activation, leaky=True)]
            c *= 2
        layers += [nn.Conv2d(c, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        return self.net(x01 * 2.0 - 1.0)

    def scores(self, x01: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(x01))


class ProjectionHead(nn.Module):
    """Per-location two-layer MLP followed by L2 normalization."""

    def __init__(self, in_channels: int, k_proj: int = 64, activation: str = "relu"):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_channels, k_proj), _act(activation), nn.Linear(k_proj, k_proj))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(..., C) feature vectors -> (..., k_proj) unit vectors."""
        return F.normalize(self.mlp(feats), dim=-1, eps=1e-12)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
