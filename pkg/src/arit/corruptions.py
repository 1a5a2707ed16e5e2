"""Synthetic corruption benchmark: seven ImageNet-C style corruptions with
graded severities and a random two-corruption superposition policy.

Every parameter is interpolated linearly from its identity value (intensity 0)
to the severity-table value (intensity 1), so intensity 0 is an exact no-op.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from arit.errors import DataError
from arit.imagecore.types import SceneSample, as_image

KINDS = (
    "darkness",
    "zoom_blur",
    "defocus_blur",
    "contrast",
    "motion_blur",
    "fog",
    "gaussian_noise",
)

# (identity value, table for severities 1..5)
SEVERITY_TABLE = {
    "gaussian_noise": (0.0, (0.04, 0.06, 0.08, 0.10, 0.14)),
    "darkness": (1.0, (0.8, 0.65, 0.5, 0.4, 0.3)),
    "contrast": (1.0, (0.75, 0.6, 0.45, 0.3, 0.2)),
    "defocus_blur": (0.0, (1, 2, 3, 4, 6)),
    "motion_blur": (1.0, (3, 5, 7, 9, 13)),
    "zoom_blur": (1.0, (1.05, 1.10, 1.15, 1.20, 1.30)),
    "fog": (0.0, (0.15, 0.25, 0.35, 0.45, 0.6)),
}

ZOOM_SAMPLES = 10
FOG_ROUGHNESS = 0.65


def hash64(*values: int) -> int:
    """Order-sensitive 64-bit hash of integers (stable across platforms)."""
    payload = b"".join(int(v).to_bytes(16, "little", signed=True) for v in values)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 3
    intensity: float = 1.0
    angle: float = 0.0  # radians, motion blur only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown corruption kind {self.kind!r}")
        if int(self.severity) != self.severity or not 1 <= self.severity <= 5:
            raise DataError(f"severity must be an integer in 1..5, got {self.severity}")
        if not (math.isfinite(self.intensity) and math.isfinite(self.angle)):
            raise DataError("corruption parameters must be finite")
        if not 0.0 <= self.intensity <= 1.0:
            raise DataError(f"intensity must lie in [0, 1], got {self.intensity}")

    @property
    def kind_index(self) -> int:
        return KINDS.index(self.kind)

    def parameter(self) -> float:
        identity, table = SEVERITY_TABLE[self.kind]
        return identity + self.intensity * (table[self.severity - 1] - identity)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionSpec":
        return cls(obj["kind"], int(obj["severity"]), float(obj["intensity"]), float(obj.get("angle", 0.0)))


@dataclass(frozen=True)
class CorruptionPolicy:
    """Two distinct kinds per frame with uniform severities and intensities.

    ``intensity_range`` defaults to [0.5, 1.0]; setting it to (0, 0) turns the
    benchmark into an identity map, which the tests use.
    """

    seed: int = 0
    severity_range: tuple[int, int] = (1, 5)
    intensity_range: tuple[float, float] = (0.5, 1.0)
    n_kinds: int = 2

    def __post_init__(self):
        lo, hi = self.severity_range
        if lo > hi:
            raise DataError(f"empty severity range {self.severity_range}")
        if lo < 1 or hi > 5:
            raise DataError(f"severity range must lie within 1..5, got {self.severity_range}")
        ilo, ihi = self.intensity_range
        if not 0.0 <= ilo <= ihi <= 1.0:
            raise DataError(f"invalid intensity range {self.intensity_range}")
        if self.n_kinds != 2:
            raise DataError("the policy always superimposes exactly two corruptions")


# --------------------------------------------------------------------------- kernels


def disk_kernel(radius: float) -> np.ndarray:
    """Anti-aliased normalized disk; radius 0 gives the unit impulse."""
    r = int(math.ceil(radius))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.clip(radius + 0.5 - np.hypot(x, y), 0.0, 1.0)
    return k / k.sum()


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Normalized line kernel of the given length (pixels) through the center."""
    half = (length - 1.0) / 2.0
    r = int(math.ceil(half)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    n = max(int(math.ceil(length)) * 4 + 1, 1)
    t = np.linspace(-half, half, n)
    xs = r + t * math.cos(angle)
    ys = r + t * math.sin(angle)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        np.add.at(k, (y0 + dy, x0 + dx), w)
    return k / k.sum()


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c].astype(np.float64), kernel, mode="nearest")
    return out


def _zoom(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([cy + (yy - cy) / factor, cx + (xx - cx) / factor])
    out = np.empty(img.shape, dtype=np.float64)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(img[:, :, c].astype(np.float64), coords, order=1, mode="nearest")
    return out


def plasma_fractal(size: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square height map on a (2^k + 1) grid, min-max normalized to [0, 1]."""
    n = 1
    while n + 1 < size:
        n *= 2
    grid = np.zeros((n + 1, n + 1))
    grid[0, 0], grid[0, n], grid[n, 0], grid[n, n] = rng.uniform(-1, 1, 4)
    step, amp = n, 1.0
    while step > 1:
        half = step // 2
        amp *= roughness
        # diamond step: centers of squares
        corners = grid[0 : n + 1 : step, 0 : n + 1 : step]
        avg = (corners[:-1, :-1] + corners[1:, :-1] + corners[:-1, 1:] + corners[1:, 1:]) / 4.0
        grid[half:n:step, half:n:step] = avg + amp * rng.uniform(-1, 1, avg.shape)
        # square step: edge midpoints, averaging the available neighbors
        for y0 in (0, half):
            x0 = half if y0 == 0 else 0
            ys = np.arange(y0, n + 1, step)
            xs = np.arange(x0, n + 1, step)
            Y, X = np.meshgrid(ys, xs, indexing="ij")
            total = np.zeros(Y.shape)
            count = np.zeros(Y.shape)
            for dy, dx in ((-half, 0), (half, 0), (0, -half), (0, half)):
                yy, xx = Y + dy, X + dx
                ok = (yy >= 0) & (yy <= n) & (xx >= 0) & (xx <= n)
                total[ok] += grid[yy[ok], xx[ok]]
                count[ok] += 1
            grid[Y, X] = total / count + amp * rng.uniform(-1, 1, Y.shape)
        step = half
    grid -= grid.min()
    peak = grid.max()
    return grid / peak if peak > 0 else grid


# --------------------------------------------------------------------------- corruptions


def apply_corruption(image, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Apply one corruption; deterministic in (image, spec, seed), output in [0, 1]."""
    img = as_image(image)
    if not isinstance(spec, CorruptionSpec):
        raise DataError("spec must be a CorruptionSpec")
    identity, _ = SEVERITY_TABLE[spec.kind]
    p = spec.parameter()
    if p == identity:
        return img.copy()
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    x = img.astype(np.float64)

    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, p, size=x.shape)
    elif spec.kind == "darkness":
        out = x * p
    elif spec.kind == "contrast":
        mu = x.mean()
        out = (x - mu) * p + mu
    elif spec.kind == "defocus_blur":
        out = _convolve(x, disk_kernel(p))
    elif spec.kind == "motion_blur":
        out = _convolve(x, motion_kernel(p, spec.angle))
    elif spec.kind == "zoom_blur":
        out = np.mean([_zoom(x, z) for z in np.linspace(1.0, p, ZOOM_SAMPLES)], axis=0)
    elif spec.kind == "fog":
        h, w = x.shape[:2]
        plasma = plasma_fractal(max(h, w), FOG_ROUGHNESS, rng)[:h, :w]
        out = (1.0 - p) * x + p * plasma[:, :, None]
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise DataError(f"unknown corruption kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corruption_seed(policy_seed: int, frame_id: int, kind_index: int) -> int:
    return hash64(policy_seed, frame_id, kind_index)


def sample_policy(policy: CorruptionPolicy, frame_id: int) -> tuple[CorruptionSpec, CorruptionSpec]:
    rng = np.random.default_rng(hash64(policy.seed, frame_id, -1))
    kinds = rng.choice(len(KINDS), size=2, replace=False)
    lo, hi = policy.severity_range
    ilo, ihi = policy.intensity_range
    specs = []
    for k in kinds:
        severity = int(rng.integers(lo, hi + 1))
        intensity = float(rng.uniform(ilo, ihi)) if ihi > ilo else float(ilo)
        angle = float(rng.uniform(0.0, math.pi))
        specs.append(CorruptionSpec(KINDS[int(k)], severity, intensity, angle))
    return specs[0], specs[1]


def corrupt_image(image, policy: CorruptionPolicy, frame_id: int):
    """Superimpose the two policy corruptions for one frame. Returns (image, log entry)."""
    specs = sample_policy(policy, frame_id)
    out = as_image(image)
    entry = {"frame_id": int(frame_id), "specs": []}
    for spec in specs:
        seed = corruption_seed(policy.seed, frame_id, spec.kind_index)
        out = apply_corruption(out, spec, seed)
        entry["specs"].append({**spec.to_json(), "seed": seed})
    return out, entry


def build_benchmark(dataset, policy: CorruptionPolicy):
    """Replace every real image by its two-corruption version.

    Returns (corrupted samples, spec log); virtual images, depth and poses
    are passed through untouched.
    """
    if not dataset:
        raise DataError("cannot build a benchmark from an empty dataset")
    out, log = [], []
    for s in dataset:
        img, entry = corrupt_image(s.real_image, policy, s.frame_id)
        out.append(dataclasses.replace(s, real_image=img))
        log.append(entry)
    return out, log


def write_spec_log(path, log) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_spec_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def single_corruption(images, kind: str, severity: int, seed: int = 0, intensity: float = 1.0):
    """Apply one corruption kind to a list of images (used by the bottleneck analysis)."""
    spec = CorruptionSpec(kind, severity, intensity, angle=0.25 * math.pi)
    return [apply_corruption(img, spec, hash64(seed, i, spec.kind_index)) for i, img in enumerate(images)]
