"""End-to-end glue shared by the CLI and the acceptance runs: benchmark
construction, pseudo-labelling, training and evaluation of one variant."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from arit.corruptions import CorruptionPolicy, build_benchmark, single_corruption
from arit.downstream import DepthNetSpec, build_index, eval_depth_pipeline, register, train_depth_net
from arit.errors import DataError
from arit.imagecore import DatasetManifest, SceneSample, camera_intrinsics, generate_lumen_dataset
from arit.metrics import feature_map_distance, fid, kid, psnr, ssim
from arit.splatting import PseudoLabelConfig, default_embedder, generate_pseudo_labels
from arit.trainer import TrainConfig, TrainingData, encoder_features, train, translate_array

VARIANTS = {
    "baseline": (False, False),
    "decoupling": (True, False),
    "full": (True, True),
}


@dataclass
class Benchmark:
    clean: list[SceneSample]  # uncorrupted real images
    corrupted: list[SceneSample]  # real_image replaced by its two-corruption version
    manifest: DatasetManifest
    log: list[dict]

    def split(self, name: str, corrupted: bool = True) -> list[SceneSample]:
        ids = set(self.manifest.splits[name])
        return [s for s in (self.corrupted if corrupted else self.clean) if s.frame_id in ids]


def make_benchmark(seed: int = 0, n_frames: int = 700, resolution: int = 64, policy: CorruptionPolicy | None = None):
    clean, manifest = generate_lumen_dataset(seed, n_frames, resolution)
    corrupted, log = build_benchmark(clean, policy or CorruptionPolicy(seed=seed))
    return Benchmark(clean, corrupted, manifest, log)


def pseudo_labels(bench: Benchmark, split: str = "train", pcfg: PseudoLabelConfig | None = None) -> dict:
    """Pseudo-label per frame, styled on the corrupted real image of the same frame."""
    samples = bench.split(split)
    refs = {s.frame_id: s.real_image for s in samples}
    return generate_pseudo_labels(samples, refs, camera_intrinsics(bench.manifest), pcfg)


def training_data(bench: Benchmark, labels: dict | None) -> TrainingData:
    return TrainingData.from_samples(bench.split("train"), labels, bench.split("val") or None)


def variant_config(name: str, base: TrainConfig) -> TrainConfig:
    if name not in VARIANTS:
        raise DataError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    decoupling, resilient = VARIANTS[name]
    model = dataclasses.replace(base.model, decoupling=decoupling, resilient=resilient)
    return dataclasses.replace(base, model=model)


def translation_scores(state, bench: Benchmark, split: str = "test", embedder=None) -> dict:
    """FID/KID of translated corrupted images against the virtual images of
    the split, plus paired PSNR/SSIM."""
    embedder = embedder or default_embedder()
    samples = bench.split(split)
    if len(samples) < 2:
        raise DataError(f"split {split!r} needs at least 2 frames")
    out = translate_array(state, np.stack([s.real_image for s in samples]))
    virtual = [s.virtual_image for s in samples]
    fa, fb = embedder(list(out)), embedder(virtual)
    return {
        "fid": fid(fa, fb),
        "kid": kid(fa, fb),
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(out, virtual)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(out, virtual)])),
    }


def mean_feature_distance(state, clean_images, noisy_images) -> float:
    """Mean over images of the encoder feature-map distance between clean and corrupted inputs."""
    fc, fn = encoder_features(state, clean_images), encoder_features(state, noisy_images)
    return float(np.mean([feature_map_distance(a, b) for a, b in zip(fc, fn)]))


def bottleneck_rows(state, bench: Benchmark, kinds, severity: int = 3, split: str = "test", seed: int = 0):
    """Per corruption kind: feature-map distance (clean vs corrupted encoder
    features) and PSNR of the translated corrupted image against the virtual image."""
    clean = bench.split(split, corrupted=False)
    clean_imgs = [s.real_image for s in clean]
    virtual = [s.virtual_image for s in clean]
    rows = []
    for kind in kinds:
        noisy = single_corruption(clean_imgs, kind, severity, seed=seed)
        out = translate_array(state, np.stack(noisy))
        rows.append(
            {
                "kind": kind,
                "feature_map_distance": mean_feature_distance(state, clean_imgs, noisy),
                "psnr": float(np.mean([psnr(a, b) for a, b in zip(out, virtual)])),
            }
        )
    return rows


def run_variant(name: str, base: TrainConfig, bench: Benchmark, labels: dict | None, log_path=None):
    cfg = variant_config(name, base)
    state, log = train(cfg, training_data(bench, labels), log_path=log_path)
    return state, log


def depth_comparison(state, train_samples, test_samples, spec: DepthNetSpec = DepthNetSpec()) -> dict:
    """Depth net trained on virtual (image, depth) pairs, evaluated on raw
    corrupted test images and, given a state, on their translations."""
    model = train_depth_net([(s.virtual_image, s.depth) for s in train_samples], spec)
    raw = [s.real_image for s in test_samples]
    depths = [s.depth for s in test_samples]
    out = {"raw": eval_depth_pipeline(model, raw, depths)}
    if state is not None:
        out["translated"] = eval_depth_pipeline(model, list(translate_array(state, np.stack(raw))), depths)
    return out


def registration_comparison(state, test_samples, threshold_mm: float = 5.0, embedder=None) -> dict:
    """Retrieval against the virtual test images with raw and translated corrupted queries."""
    embedder = embedder or default_embedder()
    index = build_index([s.virtual_image for s in test_samples], [s.pose for s in test_samples], embedder)
    raw = [s.real_image for s in test_samples]
    poses = [s.pose for s in test_samples]
    out = {"raw": register(raw, poses, index, threshold_mm, embedder=embedder)}
    if state is not None:
        out["translated"] = register(list(translate_array(state, np.stack(raw))), poses, index, threshold_mm, embedder=embedder)
    return out
