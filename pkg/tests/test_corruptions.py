import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from arit.corruptions import (
    KINDS,
    SEVERITY_TABLE,
    CorruptionPolicy,
    CorruptionSpec,
    apply_corruption,
    build_benchmark,
    corruption_seed,
    disk_kernel,
    hash64,
    motion_kernel,
    read_spec_log,
    sample_policy,
    write_spec_log,
)
from arit.errors import DataError


def rand_img(seed=0, size=32):
    return np.random.default_rng(seed).uniform(0, 1, (size, size, 3)).astype(np.float32)


def ramp(size=64):
    y, x = np.mgrid[0:size, 0:size].astype(np.float32)
    g = 0.2 + 0.6 * (x + y) / (2 * (size - 1))
    return np.repeat(g[:, :, None], 3, axis=2).astype(np.float32)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_intensity_is_identity(kind):
    img = rand_img(1)
    out = apply_corruption(img, CorruptionSpec(kind, 5, 0.0), seed=3)
    assert np.array_equal(out, img)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1), st.integers(1, 5))
def test_contrast_fixes_constant_image(intensity, severity):
    img = np.full((16, 16, 3), 0.5, dtype=np.float32)
    out = apply_corruption(img, CorruptionSpec("contrast", severity, intensity), 0)
    assert np.array_equal(out, img)


def test_gaussian_noise_statistics():
    img = np.full((64, 64, 3), 0.5, dtype=np.float32)
    out = apply_corruption(img, CorruptionSpec("gaussian_noise", 3, 1.0), seed=11)
    diff = (out - img).astype(np.float64)
    sigma = SEVERITY_TABLE["gaussian_noise"][1][2]
    assert diff.size >= 4096
    assert abs(diff.std() - sigma) <= 0.1 * sigma
    assert abs(np.abs(diff).mean() - sigma * math.sqrt(2 / math.pi)) <= 0.1 * sigma * math.sqrt(2 / math.pi)


@pytest.mark.parametrize("kind", KINDS)
def test_output_range_and_determinism(kind):
    img = rand_img(2)
    spec = CorruptionSpec(kind, 4, 0.8, angle=0.7)
    a = apply_corruption(img, spec, 5)
    b = apply_corruption(img, spec, 5)
    assert a.dtype == np.float32 and a.shape == img.shape
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


def test_seed_changes_stochastic_corruptions():
    img = rand_img(3)
    for kind in ("gaussian_noise", "fog"):
        spec = CorruptionSpec(kind, 3)
        assert not np.array_equal(apply_corruption(img, spec, 1), apply_corruption(img, spec, 2))


def test_darkness_and_contrast_are_monotone():
    img = rand_img(4)
    dark = apply_corruption(img, CorruptionSpec("darkness", 3), 0)
    assert np.all(dark <= img)
    flat = img.reshape(-1)
    order = np.argsort(flat, kind="stable")
    for kind in ("darkness", "contrast"):
        out = apply_corruption(img, CorruptionSpec(kind, 4), 0).reshape(-1)
        assert np.all(np.diff(out[order]) >= -1e-7)


@pytest.mark.parametrize("kind", ["defocus_blur", "motion_blur", "zoom_blur"])
@pytest.mark.parametrize("severity", [1, 3, 5])
def test_blurs_preserve_interior_mean(kind, severity):
    img = ramp(64)
    out = apply_corruption(img, CorruptionSpec(kind, severity, angle=0.4), 0)
    m = 10
    assert abs(out[m:-m, m:-m].mean() - img[m:-m, m:-m].mean()) <= 1e-3


def test_blur_kernels_normalized():
    for r in (0, 1, 2.5, 6):
        assert disk_kernel(r).sum() == pytest.approx(1.0)
    assert disk_kernel(0).shape == (1, 1)
    for length, angle in ((3, 0.0), (7, 1.0), (13, 2.9)):
        k = motion_kernel(length, angle)
        assert k.sum() == pytest.approx(1.0)
        # symmetric about the center, so linear images are preserved
        assert np.allclose(k, k[::-1, ::-1])


def test_fog_lower_bound():
    img = rand_img(5)
    for sev in range(1, 6):
        spec = CorruptionSpec("fog", sev)
        t = spec.parameter()
        out = apply_corruption(img, spec, 9)
        assert np.all(out >= (1 - t) * img - 1e-6)


def test_spec_validation():
    with pytest.raises(DataError):
        CorruptionSpec("snow")
    with pytest.raises(DataError):
        CorruptionSpec("fog", 0)
    with pytest.raises(DataError):
        CorruptionSpec("fog", 3, 1.5)
    with pytest.raises(DataError):
        CorruptionSpec("motion_blur", 3, 1.0, angle=float("nan"))
    with pytest.raises(DataError):
        CorruptionSpec("fog", 3, float("inf"))


def test_intensity_interpolation():
    spec = CorruptionSpec("darkness", 3, 0.5)
    identity, table = SEVERITY_TABLE["darkness"]
    assert spec.parameter() == pytest.approx(identity + 0.5 * (table[2] - identity))


def test_policy_contract_and_determinism():
    policy = CorruptionPolicy(seed=42)
    for frame in range(200):
        a, b = sample_policy(policy, frame)
        assert a.kind != b.kind
        assert 0.5 <= a.intensity <= 1.0 and 0.5 <= b.intensity <= 1.0
        assert 1 <= a.severity <= 5
        assert 0 <= a.angle < math.pi
        assert sample_policy(policy, frame) == (a, b)


def test_policy_rejects_empty_range():
    with pytest.raises(DataError):
        CorruptionPolicy(severity_range=(4, 2))
    with pytest.raises(DataError):
        CorruptionPolicy(severity_range=(0, 3))


def test_policy_kind_frequencies_are_uniform():
    policy = CorruptionPolicy(seed=7)
    counts = np.zeros(len(KINDS))
    sev = np.zeros(5)
    n = 7000
    for frame in range(n):
        for spec in sample_policy(policy, frame):
            counts[spec.kind_index] += 1
            sev[spec.severity - 1] += 1
    p = 2 / len(KINDS)
    expected = n * p
    sd = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - expected) <= 3 * sd)
    assert stats.chisquare(sev).pvalue > 1e-3


def test_seeds_are_order_independent():
    assert corruption_seed(1, 2, 3) == hash64(1, 2, 3)
    assert hash64(1, 2, 3) != hash64(3, 2, 1)
    assert hash64(2**63, -1) != hash64(2**63 - 1, -1)


def test_build_benchmark(lumen_small, tmp_path):
    samples, _ = lumen_small
    data = samples[:5]
    out, log = build_benchmark(data, CorruptionPolicy(seed=1))
    assert len(out) == 5 and len(log) == 5
    assert all(len(e["specs"]) == 2 for e in log)
    for s, c, e in zip(data, out, log):
        assert np.array_equal(s.virtual_image, c.virtual_image)
        assert np.array_equal(s.depth, c.depth)
        assert s.pose == c.pose
        # composition of the two logged corruptions
        img = s.real_image
        for rec in e["specs"]:
            img = apply_corruption(img, CorruptionSpec.from_json(rec), rec["seed"])
        assert np.array_equal(img, c.real_image)
    again, _ = build_benchmark(data, CorruptionPolicy(seed=1))
    assert all(a.real_image.tobytes() == b.real_image.tobytes() for a, b in zip(out, again))
    write_spec_log(tmp_path / "log.jsonl", log)
    assert read_spec_log(tmp_path / "log.jsonl") == log


def test_build_benchmark_identity_policy(lumen_small):
    samples, _ = lumen_small
    out, _ = build_benchmark(samples[:3], CorruptionPolicy(seed=0, severity_range=(3, 3), intensity_range=(0.0, 0.0)))
    for a, b in zip(samples, out):
        assert np.array_equal(a.real_image, b.real_image)


def test_build_benchmark_rejects_empty():
    with pytest.raises(DataError):
        build_benchmark([], CorruptionPolicy())
