"""Procedural paired-domain lumen scenes.

A pinhole camera travels along the centerline of a tube whose centerline is
perturbed by two sinusoids and whose radius wobbles slowly. Each frame is ray
cast against the tube wall; the *virtual* image is a smooth depth-shaded
rendering and the *real* image adds wall texture (multi-octave value noise),
a headlight specular lobe, cos^4 vignetting and a per-frame illumination gain.
"""
from __future__ import annotations

import copy

import numpy as np

from arit.errors import DataError
from arit.imagecore.types import CameraPose, DatasetManifest, SceneSample, matrix_to_quat

DEFAULT_PARAMS = {
    "radius_mm": 10.0,
    "radius_wobble": 0.12,
    "radius_period_mm": 47.0,
    "bend_amp_mm": [7.0, 5.0],
    "bend_period_mm": [110.0, 83.0],
    "step_mm": 1.0,
    "fov_deg": 90.0,
    "far_mm": 120.0,
    "light_falloff_mm": 30.0,
    "ambient": 0.15,
    "virtual_albedo": [0.92, 0.80, 0.62],
    "real_albedo": [0.95, 0.55, 0.45],
    "real_exposure": 1.9,
    "texture_cells_around": 10,
    "texture_cell_mm": 9.0,
    "texture_octaves": 4,
    "texture_persistence": 0.5,
    "texture_strength": 0.55,
    "specular_strength": 0.45,
    "shininess": 24.0,
    "gain_range": [0.6, 1.4],
    "splits": None,
}

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _lattice(i, j, octave: int, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(0x9E3779B97F4A7C15) * np.uint64(octave + 1))
        h = _mix64(h ^ (i.astype(np.int64).astype(np.uint64) * np.uint64(0x632BE59BD9B4E019)))
        h = _mix64(h ^ (j.astype(np.int64).astype(np.uint64) * np.uint64(0x8CB92BA72F3D8DD7)))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(u, z, seed: int, params) -> np.ndarray:
    """Periodic-in-u value noise in [0, 1]. ``u`` in turns around the tube, ``z`` in mm."""
    n_around = int(params["texture_cells_around"])
    cell = float(params["texture_cell_mm"])
    total = np.zeros_like(u, dtype=np.float64)
    amp, norm = 1.0, 0.0
    for octave in range(int(params["texture_octaves"])):
        period = n_around * 2**octave
        x = np.mod(u, 1.0) * period
        y = z / cell * 2**octave
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        sx = fx * fx * (3 - 2 * fx)
        sy = fy * fy * (3 - 2 * fy)
        i0 = np.mod(x0, period)
        i1 = np.mod(x0 + 1, period)
        v00 = _lattice(i0, y0, octave, seed)
        v10 = _lattice(i1, y0, octave, seed)
        v01 = _lattice(i0, y0 + 1, octave, seed)
        v11 = _lattice(i1, y0 + 1, octave, seed)
        top = v00 + sx * (v10 - v00)
        bot = v01 + sx * (v11 - v01)
        total += amp * (top + sy * (bot - top))
        norm += amp
        amp *= float(params["texture_persistence"])
    return total / norm


class Tube:
    """Generalized cylinder: the disc of radius R(z) about c(z) in every z-plane."""

    def __init__(self, seed: int, params):
        rng = np.random.default_rng([seed, 0x7B])
        self.phase = rng.uniform(0, 2 * np.pi, size=3)
        self.r0 = float(params["radius_mm"])
        self.wobble = float(params["radius_wobble"])
        self.pr = float(params["radius_period_mm"])
        self.amp = np.asarray(params["bend_amp_mm"], dtype=np.float64)
        self.per = np.asarray(params["bend_period_mm"], dtype=np.float64)
        slope = np.sum(2 * np.pi * np.abs(self.amp) / self.per)
        dr = 2 * np.pi * self.r0 * abs(self.wobble) / self.pr
        self.lipschitz = float(np.sqrt(1.0 + (slope + dr) ** 2))

    def center(self, z):
        w = 2 * np.pi / self.per
        return (
            self.amp[0] * np.sin(w[0] * z + self.phase[0]),
            self.amp[1] * np.sin(w[1] * z + self.phase[1]),
        )

    def center_slope(self, z):
        w = 2 * np.pi / self.per
        return (
            self.amp[0] * w[0] * np.cos(w[0] * z + self.phase[0]),
            self.amp[1] * w[1] * np.cos(w[1] * z + self.phase[1]),
        )

    def radius(self, z):
        return self.r0 * (1.0 + self.wobble * np.sin(2 * np.pi * z / self.pr + self.phase[2]))

    def radius_slope(self, z):
        w = 2 * np.pi / self.pr
        return self.r0 * self.wobble * w * np.cos(w * z + self.phase[2])

    def sdf(self, p):
        cx, cy = self.center(p[..., 2])
        rho = np.hypot(p[..., 0] - cx, p[..., 1] - cy)
        return rho - self.radius(p[..., 2])

    def inward_normal(self, p):
        z = p[..., 2]
        cx, cy = self.center(z)
        sx, sy = self.center_slope(z)
        dx = p[..., 0] - cx
        dy = p[..., 1] - cy
        rho = np.maximum(np.hypot(dx, dy), 1e-9)
        grad = np.stack(
            [dx / rho, dy / rho, -(sx * dx + sy * dy) / rho - self.radius_slope(z)], axis=-1
        )
        return -grad / np.linalg.norm(grad, axis=-1, keepdims=True)

    def pose_at(self, z: float) -> CameraPose:
        cx, cy = self.center(z)
        sx, sy = self.center_slope(z)
        fwd = np.array([sx, sy, 1.0])
        fwd /= np.linalg.norm(fwd)
        down = np.array([0.0, 1.0, 0.0]) - fwd[1] * fwd
        down /= np.linalg.norm(down)
        right = np.cross(down, fwd)
        rot = np.stack([right, down, fwd], axis=1)
        return CameraPose(np.array([cx, cy, z]), matrix_to_quat(rot))


def intrinsics_for(resolution: int, fov_deg: float):
    """(fx, fy, cx, cy) with pixel centers at integer coordinates."""
    f = (resolution / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    c = (resolution - 1) / 2.0
    return f, f, c, c


def ray_directions(resolution: int, fov_deg: float) -> np.ndarray:
    """Unit camera-frame ray directions, shape (H, W, 3)."""
    fx, fy, cx, cy = intrinsics_for(resolution, fov_deg)
    v, u = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    d = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _trace(tube: Tube, origin, dirs, far: float):
    """Sphere-trace rays to the first wall crossing. Returns distances along rays."""
    shape = dirs.shape[:-1]
    dirs = dirs.reshape(-1, 3)
    t = np.zeros(dirs.shape[0])
    active = np.ones_like(t, dtype=bool)
    for _ in range(400):
        if not active.any():
            break
        p = origin + t[active, None] * dirs[active]
        f = tube.sdf(p)
        step = np.maximum(-f, 0.0) / tube.lipschitz
        t[active] += step
        done = (-f < 1e-6) | (t[active] >= far)
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return np.minimum(t, far).reshape(shape)


def _merge_params(params):
    merged = copy.deepcopy(DEFAULT_PARAMS)
    if params:
        unknown = set(params) - set(DEFAULT_PARAMS)
        if unknown:
            raise DataError(f"unknown generator parameters {sorted(unknown)}")
        merged.update(copy.deepcopy(params))
    return merged


def render_frame(seed: int, frame_id: int, resolution: int, params=None) -> SceneSample:
    """Render one frame; a pure function of its arguments."""
    params = _merge_params(params)
    tube = Tube(seed, params)
    pose = tube.pose_at(frame_id * float(params["step_mm"]))
    dirs_cam = ray_directions(resolution, float(params["fov_deg"]))
    dirs = dirs_cam @ pose.rotation.T
    far = float(params["far_mm"])
    t = _trace(tube, pose.position, dirs, far)
    hit = pose.position + t[..., None] * dirs
    depth = (t * dirs_cam[..., 2]).astype(np.float32)

    normal = tube.inward_normal(hit)
    cos_i = np.clip(np.sum(normal * -dirs, axis=-1), 0.0, 1.0)
    falloff = 1.0 / (1.0 + (t / float(params["light_falloff_mm"])) ** 2)
    ambient = float(params["ambient"])
    diffuse = (ambient + (1 - ambient) * cos_i) * falloff

    virtual = diffuse[..., None] * np.asarray(params["virtual_albedo"])

    cx, cy = tube.center(hit[..., 2])
    turns = np.arctan2(hit[..., 1] - cy, hit[..., 0] - cx) / (2 * np.pi)
    noise = value_noise(turns, hit[..., 2], seed, params)
    strength = float(params["texture_strength"])
    tex = 1.0 + strength * (2.0 * noise - 1.0)
    spec = float(params["specular_strength"]) * cos_i ** float(params["shininess"]) * falloff
    vignette = dirs_cam[..., 2] ** 4
    lo, hi = params["gain_range"]
    gain = np.random.default_rng([seed, frame_id, 0x11]).uniform(lo, hi)
    real = (diffuse[..., None] * tex[..., None] * np.asarray(params["real_albedo"]) + spec[..., None])
    real = float(params["real_exposure"]) * gain * vignette[..., None] * real

    return SceneSample(
        virtual_image=np.clip(virtual, 0, 1).astype(np.float32),
        real_image=np.clip(real, 0, 1).astype(np.float32),
        depth=depth,
        pose=pose,
        frame_id=frame_id,
    )


def default_splits(n_frames: int, sizes=None) -> dict[str, list[int]]:
    if sizes is not None:
        if sum(sizes) != n_frames:
            raise DataError(f"split sizes {sizes} do not sum to {n_frames}")
        n_train, n_val, _ = sizes
    else:
        n_val = n_frames // 7
        n_train = n_frames - 2 * n_val
    ids = list(range(n_frames))
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


def generate_lumen_dataset(seed: int, n_frames: int, resolution: int = 64, params=None):
    """Generate ``n_frames`` consecutive frames. Returns (samples, manifest).

    Splits are contiguous trajectory segments (train, then val, then test);
    by default val and test each take ``n_frames // 7`` frames, which gives
    500/100/100 for the canonical 700-frame configuration.
    """
    if n_frames < 1:
        raise DataError("n_frames must be >= 1")
    if resolution < 32:
        raise DataError("resolution must be >= 32")
    merged = _merge_params(params)
    samples = [render_frame(seed, i, resolution, merged) for i in range(n_frames)]
    manifest = DatasetManifest(
        splits=default_splits(n_frames, merged["splits"]),
        root_path=".",
        resolution=resolution,
        seed=seed,
        generator_params=merged,
    )
    return samples, manifest


def camera_intrinsics(manifest: DatasetManifest):
    fov = float(manifest.generator_params.get("fov_deg", DEFAULT_PARAMS["fov_deg"]))
    return intrinsics_for(manifest.resolution, fov)
