from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from arit.errors import DataError, FormatVersionError
from arit.imagecore.types import quat_to_matrix

GSPC_MAGIC = b"GSPC"
GSPC_VERSION = 1


@dataclass(frozen=True)
class Gaussian3D:
    x: np.ndarray  # position, mm
    s: np.ndarray  # positive scales, mm
    q: np.ndarray  # unit quaternion (w, x, y, z)
    alpha: float
    c: np.ndarray  # color coefficients (degree-0 SH: RGB)

    def __post_init__(self):
        for name, n in (("x", 3), ("s", 3), ("q", 4)):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(n))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64).reshape(-1))
        _check_params(self.s[None], self.q[None], np.array([self.alpha]))


def _check_params(scales, quats, alphas):
    if np.any(~(scales > 0)):
        raise DataError("gaussian scales must be strictly positive")
    norms = np.linalg.norm(quats, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DataError("gaussian rotations must be unit quaternions (tolerance 1e-6)")
    if np.any(~((alphas > 0) & (alphas <= 1))):
        raise DataError("gaussian opacity must lie in (0, 1]")


@dataclass
class GaussianCloud:
    """Struct-of-arrays collection of gaussians plus an axis-aligned bound (mm)."""

    positions: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    alphas: np.ndarray  # (N,)
    colors: np.ndarray  # (N, k)
    bounds: np.ndarray = field(default=None)  # (2, 3) min/max corner

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if n == 0:
            raise DataError("a gaussian cloud must contain at least one gaussian")
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, -1)
        _check_params(self.scales, self.rotations, self.alphas)
        if self.bounds is None:
            self.bounds = np.stack([self.positions.min(0), self.positions.max(0)])
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if np.any(self.positions < self.bounds[0]) or np.any(self.positions > self.bounds[1]):
            raise DataError("gaussian positions must lie inside the cloud bounds")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def k(self) -> int:
        return self.colors.shape[1]

    @classmethod
    def from_gaussians(cls, gaussians, bounds=None) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            raise DataError("a gaussian cloud must contain at least one gaussian")
        return cls(
            positions=[g.x for g in gs],
            scales=[g.s for g in gs],
            rotations=[g.q for g in gs],
            alphas=[g.alpha for g in gs],
            colors=np.stack([g.c for g in gs]),
            bounds=bounds,
        )

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.positions[i], self.scales[i], self.rotations[i], float(self.alphas[i]), self.colors[i])

    def with_colors(self, colors) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.scales.copy(), self.rotations.copy(), self.alphas.copy(),
            np.asarray(colors, dtype=np.float64).reshape(self.colors.shape).copy(), self.bounds.copy(),
        )

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[idx], self.scales[idx], self.rotations[idx], self.alphas[idx], self.colors[idx], self.bounds
        )


def covariance_from(q, s) -> np.ndarray:
    """Sigma = R S S^T R^T for unit quaternion ``q`` (w, x, y, z) and scales ``s``."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    _check_params(s.reshape(1, 3), q.reshape(1, 4), np.array([1.0]))
    rot = quat_to_matrix(q / np.linalg.norm(q))
    m = rot * s[None, :]
    return m @ m.T


def covariances(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched covariance_from: (N, 4), (N, 3) -> (N, 3, 3)."""
    q = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
    w, x, y, z = q.T
    rot = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=1,
    ).reshape(-1, 3, 3)
    m = rot * scales[:, None, :]
    return m @ np.transpose(m, (0, 2, 1))


def save_cloud(path, cloud: GaussianCloud) -> None:
    """Flat little-endian binary: magic, version, count, k, then float32 records."""
    records = np.concatenate(
        [cloud.positions, cloud.scales, cloud.rotations, cloud.alphas[:, None], cloud.colors], axis=1
    ).astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(GSPC_MAGIC + struct.pack("<III", GSPC_VERSION, len(cloud), cloud.k))
        fh.write(records.tobytes())


def load_cloud(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != GSPC_MAGIC:
        raise FormatVersionError(f"{path}: not a GSPC gaussian cloud file")
    version, count, k = struct.unpack("<III", data[4:16])
    if version != GSPC_VERSION:
        raise FormatVersionError(f"{path}: unsupported GSPC version {version}")
    width = 11 + k
    if len(data) - 16 != 4 * count * width:
        raise FormatVersionError(f"{path}: truncated GSPC body")
    body = np.frombuffer(data[16:], dtype="<f4")
    rec = body.reshape(count, width).astype(np.float64)
    rot = rec[:, 6:10]
    # float32 storage perturbs unit norms slightly
    rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    return GaussianCloud(rec[:, 0:3], rec[:, 3:6], rot, rec[:, 10], rec[:, 11:])
