"""Artifact-free pseudo-labels: per-frame gaussian clouds lifted from the known
depth and pose, recolored so that their renders keep the virtual content while
adopting the feature statistics of the matching real frame."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from arit.errors import DataError
from arit.imagecore.io import write_dataset
from arit.imagecore.types import DatasetManifest, SceneSample
from arit.splatting.features import default_extractor
from arit.splatting.gaussians import GaussianCloud
from arit.splatting.optimize import optimize_colors
from arit.splatting.render import RenderConfig, render

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.8


def backproject(depth: np.ndarray, pose, cfg: RenderConfig, stride: int):
    """World points and camera depths for every ``stride``-th pixel."""
    h, w = depth.shape
    off = stride // 2
    v, u = np.mgrid[off:h:stride, off:w:stride].astype(np.float64)
    z = depth[v.astype(int), u.astype(int)].astype(np.float64)
    cam = np.stack([(u - cfg.cx) / cfg.fx * z, (v - cfg.cy) / cfg.fy * z, z], axis=-1).reshape(-1, 3)
    world = cam @ pose.rotation.T + pose.position
    return world, z.reshape(-1), v.astype(int).reshape(-1), u.astype(int).reshape(-1)


def init_cloud_from_depth(samples, stride: int = 2, cfg: RenderConfig | None = None, alpha: float = DEFAULT_ALPHA):
    """One isotropic gaussian per ``stride``-th pixel of every sample.

    Scale is half the pixel footprint at that depth (s = z / f * stride / 2);
    points closer than that to an earlier point are dropped.
    """
    samples = list(samples)
    if not samples:
        raise DataError("init_cloud_from_depth needs at least one sample")
    if stride < 1:
        raise DataError("stride must be >= 1")
    if cfg is None:
        res = samples[0].depth.shape[0]
        cfg = RenderConfig.for_resolution(res)
    pts, scl, cols = [], [], []
    f = 0.5 * (cfg.fx + cfg.fy)
    for s in samples:
        world, z, v, u = backproject(s.depth, s.pose, cfg, stride)
        pts.append(world)
        scl.append(z / f * stride / 2.0)
        cols.append(s.virtual_image[v, u].astype(np.float64))
    pts = np.concatenate(pts)
    scl = np.concatenate(scl)
    cols = np.concatenate(cols)
    keep = _dedup(pts, scl)
    n = int(keep.sum())
    scales = np.repeat(scl[keep, None], 3, axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(pts[keep], scales, rot, np.full(n, alpha), cols[keep])


def _dedup(points: np.ndarray, radius: np.ndarray) -> np.ndarray:
    # greedy in input order: a point survives unless an earlier survivor lies within its radius
    tree = cKDTree(points)
    keep = np.ones(len(points), dtype=bool)
    for i in range(len(points)):
        if not keep[i]:
            continue
        for j in tree.query_ball_point(points[i], r=radius[i]):
            if j > i and np.linalg.norm(points[j] - points[i]) < radius[i]:
                keep[j] = False
    return keep


@dataclass
class PseudoLabelConfig:
    stride: int = 2
    alpha: float = DEFAULT_ALPHA
    steps: int = 200
    step_size: float = 0.05
    style_weight: float = 1.0
    max_alpha: float = 0.999
    gaussian_cutoff: float = 3.0


def pseudo_label_frame(sample: SceneSample, style_ref, cfg: RenderConfig, pcfg: PseudoLabelConfig, fx=None):
    """Render one pseudo-label for ``sample`` using ``style_ref`` as the style target."""
    fx = fx or default_extractor()
    cloud = init_cloud_from_depth([sample], pcfg.stride, cfg, pcfg.alpha)
    tuned = optimize_colors(
        cloud, [(sample.virtual_image, sample.pose)], [style_ref], fx,
        steps=pcfg.steps, step_size=pcfg.step_size, style_weight=pcfg.style_weight, cfg=cfg,
    )
    return render(tuned, sample.pose, cfg).image


def generate_pseudo_labels(samples, style_refs, intrinsics, pcfg: PseudoLabelConfig | None = None, fx=None):
    """Pseudo-label image per sample. ``style_refs`` maps frame id -> real reference image."""
    pcfg = pcfg or PseudoLabelConfig()
    samples = list(samples)
    if not samples:
        raise DataError("no samples to pseudo-label")
    res = samples[0].virtual_image.shape[0]
    fxp, fyp, cx, cy = intrinsics
    cfg = RenderConfig(fxp, fyp, cx, cy, res, res, gaussian_cutoff=pcfg.gaussian_cutoff, max_alpha=pcfg.max_alpha)
    out = {}
    for i, s in enumerate(samples):
        out[s.frame_id] = pseudo_label_frame(s, style_refs[s.frame_id], cfg, pcfg, fx)
        if (i + 1) % 50 == 0:
            log.info("pseudo-labelled %d/%d frames", i + 1, len(samples))
    return out


def write_pseudo_dataset(root, samples, labels: dict, manifest: DatasetManifest) -> Path:
    """Write pseudo-labels as the real images of a dataset under ``root/pseudo``."""
    target = Path(root) / "pseudo"
    pseudo = [dataclasses.replace(s, real_image=labels[s.frame_id].astype(np.float32)) for s in samples]
    write_dataset(target, pseudo, dataclasses.replace(manifest, root_path="."))
    return target
