"""Image-quality, distribution, depth, retrieval and correlation metrics.

All functions are pure numpy/scipy on precomputed arrays; embedding images
into feature vectors is a separate, pluggable step.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import stats
from scipy.ndimage import correlate1d

from arit.errors import DataError, NumericError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
EIG_TOL = 1e-8


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# --------------------------------------------------------------------------- image quality


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) for data range 1; ``cap`` when MSE < 1e-10."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return float(cap)
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _valid_filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable correlation, then keep only windows fully inside the image
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    r = (len(w) - 1) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(a, b) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5), channel-averaged, mean over valid windows."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DataError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _valid_filter(x, w), _valid_filter(y, w)
        sxx = _valid_filter(x * x, w) - mx * mx
        syy = _valid_filter(y * y, w) - my * my
        sxy = _valid_filter(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# --------------------------------------------------------------------------- distribution distances


def _moments(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise DataError("need an (n, d) feature array with n >= 2")
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))


def _clip_negative(vals: np.ndarray, m: np.ndarray) -> np.ndarray:
    # eigenvalues of a PSD matrix that come out negative by roundoff
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if vals.min(initial=0.0) < -EIG_TOL * scale * len(vals):
        raise NumericError(f"covariance product has a clearly negative eigenvalue {vals.min():.3e}")
    return np.clip(vals, 0.0, None)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = _clip_negative(vals, m)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, dtype=np.float64)), np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, dtype=np.float64)), np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (len(mu_a), len(mu_a)):
        raise DataError("moment shapes are inconsistent")
    # Tr (S_a S_b)^(1/2) = sum of singular values of S_b^(1/2) S_a^(1/2), which avoids
    # square roots of roundoff-sized eigenvalues and is symmetric in a and b
    tr_sqrt = np.linalg.svd(_psd_sqrt(cov_b) @ _psd_sqrt(cov_a), compute_uv=False).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(value, 0.0)


def fid(feats_a, feats_b) -> float:
    return fid_from_moments(*_moments(feats_a), *_moments(feats_b))


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel."""
    m, n = len(x), len(y)
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    # shifting every kernel value by one constant leaves the estimate unchanged
    # (weights +1, +1, -2) and makes equal-kernel inputs cancel exactly
    ref = kxy[0, 0]
    kxx, kyy, kxy = kxx - ref, kyy - ref, kxy - ref
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid(feats_a, feats_b, subset_size: int | None = None, n_subsets: int = 10, seed: int = 0) -> float:
    """Mean unbiased MMD^2 over seeded subsets; may be slightly negative."""
    a, b = np.asarray(feats_a, dtype=np.float64), np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError("feature arrays must be (n, d) with a common d")
    if subset_size is None:
        subset_size = min(100, len(a), len(b))
    if subset_size < 2 or len(a) < subset_size or len(b) < subset_size:
        raise DataError(f"need at least subset_size >= 2 samples per set, got {len(a)}, {len(b)} for {subset_size}")
    if n_subsets < 1:
        raise DataError("n_subsets must be >= 1")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(len(a), subset_size, replace=False)
        ib = rng.choice(len(b), subset_size, replace=False)
        vals.append(mmd2_unbiased(a[ia], b[ib]))
    return float(np.mean(vals))


# --------------------------------------------------------------------------- depth / retrieval / features


def depth_errors(pred, gt, valid_mask=None):
    """(abs_rel, sq_rel, rmse) over the valid pixels."""
    pred, gt = _pair(pred, gt)
    mask = np.ones(gt.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if mask.shape != gt.shape:
        raise DataError("mask shape differs from depth shape")
    if not mask.any():
        raise DataError("empty valid mask")
    p, g = pred[mask], gt[mask]
    if not np.all(g > 0):
        raise DataError("ground-truth depth must be positive on the valid mask")
    d = p - g
    return float(np.mean(np.abs(d) / g)), float(np.mean(d * d / g)), float(np.sqrt(np.mean(d * d)))


def _position(p):
    return np.asarray(getattr(p, "position", p), dtype=np.float64)


def recall_at(query_poses, retrieved_poses, threshold_mm: float = 5.0) -> float:
    """Fraction of queries whose retrieved camera position is within the threshold."""
    if len(query_poses) != len(retrieved_poses):
        raise DataError("query and retrieved lists differ in length")
    if not len(query_poses):
        raise DataError("empty pose lists")
    hits = [np.linalg.norm(_position(q) - _position(r)) <= threshold_mm for q, r in zip(query_poses, retrieved_poses)]
    return float(np.mean(hits))


def feature_map_distance(feat_clean, feat_noisy) -> float:
    """||clean - noisy||_2 / sqrt(number of elements)."""
    a, b = _pair(np.asarray(feat_clean), np.asarray(feat_noisy))
    if a.size == 0:
        raise DataError("empty feature maps")
    return float(np.linalg.norm((a - b).ravel()) / math.sqrt(a.size))


# --------------------------------------------------------------------------- correlation


def _tau_b_many(x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # x: (n,), ys: (k, n) -> tau-b of x against every row
    i, j = np.triu_indices(len(x), 1)
    sx = np.sign(x[j] - x[i])
    sy = np.sign(ys[:, j] - ys[:, i])
    n0 = len(i)
    tx = n0 - np.count_nonzero(sx)
    ty = n0 - np.count_nonzero(sy, axis=1)
    return (sy * sx).sum(axis=1) / np.sqrt((n0 - tx) * (n0 - ty))


EXACT_MAX_N = 10


def kendall_tau(xs, ys):
    """Kendall tau-b and its two-sided p-value.

    The p-value is exact by enumerating every permutation of ``ys`` for
    n <= 10 and the normal approximation otherwise."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("xs and ys must be equal-length 1-D lists")
    n = len(x)
    if n < 3:
        raise DataError("kendall_tau needs n >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DataError("kendall_tau is undefined for an all-tied list")
    tau = float(_tau_b_many(x, y[None])[0])
    if n > EXACT_MAX_N:
        return tau, float(stats.kendalltau(x, y, method="asymptotic").pvalue)
    hits, total = 0, 0
    perms = itertools.permutations(range(n))
    eps = 1e-12
    while True:
        chunk = np.array(list(itertools.islice(perms, 200_000)), dtype=np.intp)
        if not len(chunk):
            break
        taus = _tau_b_many(x, y[chunk])
        hits += int(np.count_nonzero(np.abs(taus) >= abs(tau) - eps))
        total += len(chunk)
    return tau, hits / total


def welch_t(a, b):
    """Unequal-variance two-sample t statistic and Welch-Satterthwaite degrees of freedom."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DataError("welch_t needs at least two values per sample")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se = math.sqrt(va + vb)
    if se == 0:
        raise NumericError("both samples have zero variance")
    t = (a.mean() - b.mean()) / se
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return float(t), float(df)


# --------------------------------------------------------------------------- reports


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class MetricReport:
    """Named scalars, per-item arrays of equal length and free-form metadata."""

    scalars: dict[str, float]
    per_item: dict[str, list] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scalars = {str(k): float(v) for k, v in self.scalars.items()}
        bad = [k for k, v in self.scalars.items() if not math.isfinite(v)]
        if bad:
            raise NumericError(f"non-finite report scalars: {', '.join(bad)}")
        self.per_item = {str(k): _jsonable(list(v)) for k, v in self.per_item.items()}
        lengths = {len(v) for v in self.per_item.values()}
        if len(lengths) > 1:
            raise DataError(f"per-item arrays differ in length: {sorted(lengths)}")
        self.metadata = _jsonable(dict(self.metadata))

    @property
    def n_items(self) -> int:
        return len(next(iter(self.per_item.values()))) if self.per_item else 0

    def to_json(self) -> dict:
        return {"scalars": self.scalars, "per_item": self.per_item, "metadata": self.metadata}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(obj["scalars"], obj.get("per_item", {}), obj.get("metadata", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = list(self.per_item)
        writer.writerow(cols)
        for row in zip(*(self.per_item[c] for c in cols)):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()
