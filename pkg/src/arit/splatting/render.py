"""Depth-sorted alpha compositing of projected 3D gaussians.

Per pixel, with gaussians ordered front to back,

    C = sum_i c_i a_i prod_{j<i} (1 - a_j),   a_i = alpha_i exp(-d^T cov2d^-1 d / 2)

The compositing weights w_i = a_i prod_{j<i}(1 - a_j) depend only on the
geometry and opacities, so C is linear in the colors: the renderer returns
the (pixels x gaussians) weight matrix and ``composite`` applies it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch

from arit.errors import DataError
from arit.imagecore.types import CameraPose
from arit.splatting.gaussians import Gaussian3D, GaussianCloud, covariance_from, covariances


@dataclass(frozen=True)
class RenderConfig:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 1000.0
    gaussian_cutoff: float = 3.0  # Mahalanobis radius
    max_alpha: float = 0.999
    max_condition: float = 1e8

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("focal lengths must be positive")
        if not self.near < self.far:
            raise DataError("near clip must be smaller than far clip")
        if self.width < 1 or self.height < 1:
            raise DataError("resolution must be positive")

    @classmethod
    def for_resolution(cls, resolution: int, fov_deg: float = 90.0, **kw) -> "RenderConfig":
        from arit.imagecore.lumen import intrinsics_for

        fx, fy, cx, cy = intrinsics_for(resolution, fov_deg)
        return cls(fx, fy, cx, cy, resolution, resolution, **kw)


@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2) pixels (u, v)
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,) camera z, mm
    visible: np.ndarray  # (N,) bool, inside [near, far]


def project_cloud(cloud: GaussianCloud, pose: CameraPose, cfg: RenderConfig) -> Projection:
    """Local-affine (EWA) projection of every gaussian in the cloud."""
    W = pose.rotation.T  # world -> camera
    t = (cloud.positions - pose.position) @ W.T
    z = t[:, 2]
    visible = (z >= cfg.near) & (z <= cfg.far)
    zs = np.where(visible, z, 1.0)
    mean = np.stack([cfg.fx * t[:, 0] / zs + cfg.cx, cfg.fy * t[:, 1] / zs + cfg.cy], axis=1)
    J = np.zeros((len(cloud), 2, 3))
    J[:, 0, 0] = cfg.fx / zs
    J[:, 0, 2] = -cfg.fx * t[:, 0] / zs**2
    J[:, 1, 1] = cfg.fy / zs
    J[:, 1, 2] = -cfg.fy * t[:, 1] / zs**2
    sigma = covariances(cloud.rotations, cloud.scales)
    JW = J @ W
    cov2d = JW @ sigma @ np.transpose(JW, (0, 2, 1))
    return Projection(mean, cov2d, z, visible)


def project_gaussian(g: Gaussian3D, pose: CameraPose, cfg: RenderConfig):
    """Project one gaussian. Returns (mean2d, cov2d, depth), or None when culled."""
    W = pose.rotation.T
    t = W @ (g.x - pose.position)
    if not cfg.near <= t[2] <= cfg.far:
        return None
    tx, ty, tz = t
    J = np.array([[cfg.fx / tz, 0.0, -cfg.fx * tx / tz**2], [0.0, cfg.fy / tz, -cfg.fy * ty / tz**2]])
    cov2d = J @ W @ covariance_from(g.q, g.s) @ W.T @ J.T
    mean2d = np.array([cfg.fx * tx / tz + cfg.cx, cfg.fy * ty / tz + cfg.cy])
    return mean2d, cov2d, float(tz)


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, k) float32, clipped to [0, 1]
    weights: sp.csr_matrix  # (H*W, N) compositing weights, columns in cloud storage order
    opacity: sp.csr_matrix  # (H*W, N) per-pixel opacities a_i
    order: np.ndarray  # storage indices of visible gaussians, front to back
    depth: np.ndarray  # (N,) camera depths
    diagnostics: dict = field(default_factory=dict)

    def contributions(self, pixel: int):
        """Front-to-back list of (gaussian index, a_i, w_i, depth) at a flat pixel index."""
        row_w = self.weights.getrow(pixel)
        row_a = self.opacity.getrow(pixel)
        a = dict(zip(row_a.indices, row_a.data))
        ids = sorted(a, key=lambda i: self.rank[i])
        w = dict(zip(row_w.indices, row_w.data))
        return [(int(i), float(a[i]), float(w.get(i, 0.0)), float(self.depth[i])) for i in ids]

    @property
    def rank(self) -> np.ndarray:
        r = np.full(len(self.depth), -1)
        r[self.order] = np.arange(len(self.order))
        return r

    def coverage(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).reshape(-1)

    def depth_map(self) -> np.ndarray:
        """Weight-normalized depth per pixel (NaN where nothing contributes)."""
        cov = self.coverage()
        num = self.weights @ np.where(np.isfinite(self.depth), self.depth, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(cov > 0, num / cov, np.nan)
        h, w = self.image.shape[:2]
        return d.reshape(h, w)


def _sort_order(cloud: GaussianCloud, depth: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # depth first; remaining keys make ties independent of storage order
    keys = [cloud.colors[idx, j] for j in range(cloud.k - 1, -1, -1)]
    keys += [cloud.alphas[idx]]
    keys += [cloud.rotations[idx, j] for j in range(3, -1, -1)]
    keys += [cloud.scales[idx, j] for j in range(2, -1, -1)]
    keys += [cloud.positions[idx, j] for j in range(2, -1, -1)]
    keys += [depth[idx]]
    return idx[np.lexsort(keys)]


def render(cloud: GaussianCloud, pose: CameraPose, cfg: RenderConfig) -> RenderResult:
    proj = project_cloud(cloud, pose, cfg)
    n = len(cloud)
    h, w = cfg.height, cfg.width
    diag = {"culled": int(np.sum(~proj.visible)), "degenerate": 0, "visible": 0}

    candidates = np.flatnonzero(proj.visible)
    inv = np.zeros((n, 2, 2))
    ok = np.zeros(n, dtype=bool)
    if candidates.size:
        covs = proj.cov2d[candidates]
        eig = np.linalg.eigvalsh(covs)
        good = (eig[:, 0] > 0) & (eig[:, 1] / np.maximum(eig[:, 0], 1e-300) <= cfg.max_condition)
        diag["degenerate"] = int(np.sum(~good))
        candidates = candidates[good]
        inv[candidates] = np.linalg.inv(proj.cov2d[candidates])
        radius = np.ceil(cfg.gaussian_cutoff * np.sqrt(eig[good, 1])).astype(int)
        rad = np.zeros(n, dtype=int)
        rad[candidates] = radius
        ok[candidates] = True
    order = _sort_order(cloud, proj.depth, np.flatnonzero(ok))
    diag["visible"] = int(order.size)

    transmittance = np.ones(h * w)
    rows, cols, wvals, avals = [], [], [], []
    cut2 = cfg.gaussian_cutoff**2
    for gi in order:
        mu = proj.mean2d[gi]
        r = rad[gi]
        u0, u1 = max(int(np.floor(mu[0])) - r, 0), min(int(np.ceil(mu[0])) + r, w - 1)
        v0, v1 = max(int(np.floor(mu[1])) - r, 0), min(int(np.ceil(mu[1])) + r, h - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
        du = uu.ravel() - mu[0]
        dv = vv.ravel() - mu[1]
        m = inv[gi]
        d2 = m[0, 0] * du * du + 2 * m[0, 1] * du * dv + m[1, 1] * dv * dv
        keep = d2 <= cut2
        if not keep.any():
            continue
        pix = (vv.ravel() * w + uu.ravel())[keep]
        a = np.clip(cloud.alphas[gi] * np.exp(-0.5 * d2[keep]), 0.0, cfg.max_alpha)
        wt = a * transmittance[pix]
        transmittance[pix] *= 1.0 - a
        rows.append(pix)
        cols.append(np.full(pix.size, gi))
        wvals.append(wt)
        avals.append(a)

    if rows:
        rows_a = np.concatenate(rows)
        cols_a = np.concatenate(cols)
        weights = sp.csr_matrix((np.concatenate(wvals), (rows_a, cols_a)), shape=(h * w, n))
        opacity = sp.csr_matrix((np.concatenate(avals), (rows_a, cols_a)), shape=(h * w, n))
    else:
        weights = sp.csr_matrix((h * w, n))
        opacity = sp.csr_matrix((h * w, n))
    image = np.clip(weights @ cloud.colors, 0.0, 1.0).reshape(h, w, cloud.k).astype(np.float32)
    depth = np.where(proj.visible, proj.depth, np.inf)
    return RenderResult(image, weights, opacity, order, depth, diag)


class _SparseApply(torch.autograd.Function):
    # scipy CSR products are much faster than torch COO on CPU
    @staticmethod
    def forward(ctx, colors, weights, weights_t):
        ctx.weights_t = weights_t
        out = weights @ colors.detach().cpu().numpy()
        return torch.from_numpy(np.asarray(out)).to(colors.dtype)

    @staticmethod
    def backward(ctx, grad):
        g = ctx.weights_t @ grad.detach().cpu().numpy()
        return torch.from_numpy(np.asarray(g)).to(grad.dtype), None, None


class SparseWeights:
    """A fixed compositing-weight matrix prepared for repeated products."""

    def __init__(self, weights: sp.spmatrix, dtype=np.float32):
        self.matrix = sp.csr_matrix(weights, dtype=dtype)
        self.transpose = self.matrix.T.tocsr()
        self.shape = self.matrix.shape

    def __matmul__(self, colors: torch.Tensor) -> torch.Tensor:
        m, mt = self.matrix, self.transpose
        if colors.dtype == torch.float64 and m.dtype != np.float64:
            m, mt = m.astype(np.float64), mt.astype(np.float64)
        return _SparseApply.apply(colors, m, mt)


def composite(weights, colors: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Differentiable C = W c for (F*H*W, N) weights (a SparseWeights or scipy matrix).

    Returns (F, k, H, W) images clipped to [0, 1]."""
    if not isinstance(weights, SparseWeights):
        weights = SparseWeights(weights, np.float64 if colors.dtype == torch.float64 else np.float32)
    flat = weights @ colors
    k = colors.shape[1]
    img = flat.reshape(-1, height, width, k).permute(0, 3, 1, 2)
    return img.clamp(0.0, 1.0).contiguous()
