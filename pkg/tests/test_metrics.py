import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from arit.errors import DataError, NumericError
from arit.imagecore import CameraPose
from arit.metrics import (
    MetricReport,
    depth_errors,
    feature_map_distance,
    fid,
    fid_from_moments,
    kendall_tau,
    kid,
    mmd2_unbiased,
    psnr,
    recall_at,
    ssim,
    welch_t,
)
from arit.report import bar_chart, emit_report, read_report


def rng(seed=0):
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------- psnr / ssim


def test_psnr_identity_cap():
    a = rng().random((16, 16, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a, cap=50.0) == 50.0


def test_psnr_analytic_20db():
    a = rng().random((32, 32, 3)) * 0.8
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6


def test_psnr_recomputation_and_symmetry():
    a, b = rng(1).random((20, 20, 3)), rng(2).random((20, 20, 3))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-6
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(DataError):
        psnr(a, b[:10])


def test_ssim_identity():
    a = rng().random((32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_luminance_only():
    c1, c2 = 0.3, 0.7
    C1 = 0.01**2
    a, b = np.full((20, 20, 3), c1), np.full((20, 20, 3), c2)
    assert abs(ssim(a, b) - (2 * c1 * c2 + C1) / (c1**2 + c2**2 + C1)) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_reference_implementation(seed):
    r = rng(seed)
    a = r.random((40, 48, 3))
    b = np.clip(a + 0.2 * r.normal(size=a.shape), 0, 1)
    ref = structural_similarity(
        a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert abs(ssim(a, b) - ref) < 1e-4
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_rejects_small_images():
    with pytest.raises(DataError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


# --------------------------------------------------------------------------- fid / kid


def test_fid_identical_sets_zero():
    a = rng().normal(size=(60, 16))
    assert abs(fid(a, a)) < 1e-8
    assert abs(fid(a, a[::-1])) < 1e-8


def test_fid_shifted_gaussian_moments():
    assert abs(fid_from_moments([0.0], [[1.0]], [1.0], [[1.0]]) - 1.0) < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 6))
def test_fid_diagonal_closed_form(seed, d):
    r = rng(seed)
    mu_a, mu_b = r.normal(size=d), r.normal(size=d)
    va, vb = r.uniform(0.1, 3, size=d), r.uniform(0.1, 3, size=d)
    expected = np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
    assert abs(fid_from_moments(mu_a, np.diag(va), mu_b, np.diag(vb)) - expected) < 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fid_symmetric(seed):
    r = rng(seed)
    a, b = r.normal(size=(40, 24)), r.normal(size=(50, 24)) * 1.3 + 0.2
    assert abs(fid(a, b) - fid(b, a)) < 1e-8
    assert fid(a, b) >= 0


def test_fid_needs_two_samples():
    with pytest.raises(DataError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))


def test_kid_constant_sets_exactly_zero():
    a = np.full((12, 5), 0.37)
    assert kid(a, a.copy(), subset_size=12, n_subsets=3) == 0.0
    assert kid(np.full((20, 5), -1.3), np.full((15, 5), -1.3)) == 0.0


def test_kid_two_point_sets_by_hand():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    y = np.array([[1.0, 1.0], [-1.0, 0.5]])

    def k(u, v):
        return (sum(a * b for a, b in zip(u, v)) / 2 + 1) ** 3

    expected = (
        (k(x[0], x[1]) + k(x[1], x[0])) / 2
        + (k(y[0], y[1]) + k(y[1], y[0])) / 2
        - 2 * sum(k(a, b) for a in x for b in y) / 4
    )
    assert abs(mmd2_unbiased(x, y) - expected) < 1e-12
    assert abs(kid(x, y, subset_size=2, n_subsets=4) - expected) < 1e-12


def test_kid_identical_multiset_closed_form():
    # for the same multiset the unbiased estimate is -2/(m-1) (mean diag K - mean K), not 0
    a = rng(3).normal(size=(30, 8))
    shuffled = a[rng(4).permutation(30)]
    K = (a @ a.T / 8 + 1) ** 3
    expected = -2 / 29 * (np.mean(np.diag(K)) - K.mean())
    assert abs(kid(a, shuffled, subset_size=30, n_subsets=1) - expected) < 1e-9


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kid_invariant_under_joint_permutation(seed):
    r = rng(seed)
    a, b = r.normal(size=(20, 6)), r.normal(size=(20, 6)) + 0.5
    p = r.permutation(20)
    assert abs(kid(a, b, subset_size=20, n_subsets=1) - kid(a[p], b[p], subset_size=20, n_subsets=1)) < 1e-10


def test_kid_errors():
    with pytest.raises(DataError):
        kid(np.zeros((3, 2)), np.zeros((10, 2)), subset_size=5)
    with pytest.raises(DataError):
        kid(np.zeros((3, 2)), np.zeros((3, 4)))


# --------------------------------------------------------------------------- depth / recall / features


def test_depth_errors_examples():
    g = rng().uniform(1, 5, size=(8, 8))
    assert depth_errors(g, g) == (0.0, 0.0, 0.0)
    assert depth_errors(np.full((4, 4), 4.0), np.full((4, 4), 2.0)) == (1.0, 2.0, 2.0)


def test_depth_errors_recomputation_with_mask():
    r = rng(5)
    g, p = r.uniform(1, 5, size=(6, 7)), r.uniform(1, 5, size=(6, 7))
    m = r.random((6, 7)) > 0.3
    idx = [(i, j) for i in range(6) for j in range(7) if m[i, j]]
    ar = sum(abs(p[i, j] - g[i, j]) / g[i, j] for i, j in idx) / len(idx)
    sr = sum((p[i, j] - g[i, j]) ** 2 / g[i, j] for i, j in idx) / len(idx)
    rm = math.sqrt(sum((p[i, j] - g[i, j]) ** 2 for i, j in idx) / len(idx))
    got = depth_errors(p, g, m)
    assert all(abs(x - y) < 1e-6 for x, y in zip(got, (ar, sr, rm)))


def test_depth_errors_rejects_bad_input():
    with pytest.raises(DataError):
        depth_errors(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(DataError):
        depth_errors(np.ones((2, 2)), np.zeros((2, 2)))


def _pose(x):
    return CameraPose(np.array([x, 0.0, 0.0]), np.array([1.0, 0, 0, 0]))


def test_recall_examples():
    qs = [_pose(float(i)) for i in range(10)]
    assert recall_at(qs, qs) == 1.0
    assert recall_at(qs, [_pose(q.position[0] + 10.0) for q in qs], 5.0) == 0.0
    mixed = [_pose(q.position[0] + (1.0 if i < 7 else 9.0)) for i, q in enumerate(qs)]
    assert recall_at(qs, mixed, 5.0) == 0.7
    with pytest.raises(DataError):
        recall_at([], [])


def test_feature_map_distance_examples():
    a = rng().normal(size=(2, 8, 4, 4))
    assert feature_map_distance(a, a) == 0.0
    assert abs(feature_map_distance(a, a + 0.25) - 0.25) < 1e-12
    b = rng(1).normal(size=a.shape)
    assert abs(feature_map_distance(a, b) - math.sqrt(np.sum((a - b) ** 2)) / math.sqrt(a.size)) < 1e-6


# --------------------------------------------------------------------------- kendall


def _brute_tau_b(x, y):
    conc = disc = tx = ty = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0 and dy == 0:
                tx += 1
                ty += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx * dy > 0:
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


@pytest.mark.parametrize(
    "xs,ys",
    [
        ([0.31, 0.12, 0.55, 0.48, 0.27, 0.61, 0.19], [24.1, 26.3, 19.8, 21.2, 22.5, 18.9, 25.0]),
        ([1, 2, 2, 3, 4, 5, 6], [3, 1, 2, 2, 5, 7, 4]),
    ],
)
def test_kendall_matches_brute_force_n7(xs, ys):
    tau, p = kendall_tau(xs, ys)
    ref = _brute_tau_b(xs, ys)
    assert tau == pytest.approx(ref, abs=1e-12)
    extreme = sum(abs(_brute_tau_b(xs, [ys[k] for k in perm])) >= abs(ref) - 1e-12 for perm in itertools.permutations(range(7)))
    assert p == pytest.approx(extreme / 5040, abs=1e-12)


def test_kendall_perfect_orderings():
    xs = [1.0, 2.5, 3.0, 7.0, 8.0]
    assert kendall_tau(xs, xs)[0] == pytest.approx(1.0)
    assert kendall_tau(xs, xs[::-1])[0] == pytest.approx(-1.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=5, max_size=8), st.integers(0, 1000))
def test_kendall_monotone_invariance(ys, seed):
    xs = list(rng(seed).permutation(len(ys)).astype(float))
    if len(set(ys)) < 2:
        return
    tau, p = kendall_tau(xs, ys)
    tau2, p2 = kendall_tau([math.exp(x / 3) for x in xs], [y**3 + 2 * y for y in ys])
    assert tau == pytest.approx(tau2, abs=1e-12) and p == pytest.approx(p2, abs=1e-12)


def test_kendall_large_n_uses_normal_approximation():
    x = np.arange(30.0)
    y = x + rng().normal(scale=8, size=30)
    tau, p = kendall_tau(x, y)
    assert tau == pytest.approx(_brute_tau_b(list(x), list(y)), abs=1e-12)
    assert 0 <= p <= 1


def test_kendall_errors():
    with pytest.raises(DataError):
        kendall_tau([1, 2], [2, 1])
    with pytest.raises(DataError):
        kendall_tau([1, 1, 1], [1, 2, 3])


def test_welch_t_formula():
    a, b = [20.1, 21.3, 19.8, 22.0], [18.2, 18.9, 19.5, 17.7, 18.0]
    ma, mb = np.mean(a), np.mean(b)
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    t, df = welch_t(a, b)
    assert t == pytest.approx((ma - mb) / math.sqrt(va / 4 + vb / 5), rel=1e-12)
    assert df == pytest.approx((va / 4 + vb / 5) ** 2 / ((va / 4) ** 2 / 3 + (vb / 5) ** 2 / 4), rel=1e-12)


# --------------------------------------------------------------------------- reports


def _report(n=7):
    kinds = ["noise", "blur", "fog", "motion", "contrast", "bright", "spec"][:n]
    return MetricReport(
        {"tau": -0.42, "mean_psnr": 21.5},
        {"kind": kinds, "distance": [0.1 * i for i in range(n)], "psnr": [20.0 + i for i in range(n)]},
        {"config_hash": "abc", "seed": 0},
    )


def test_report_rejects_non_finite():
    with pytest.raises(NumericError):
        MetricReport({"x": float("nan")})
    with pytest.raises(DataError):
        MetricReport({}, {"a": [1, 2], "b": [1]})


def test_emit_report_json_round_trip_and_csv_rows(tmp_path):
    rep = _report()
    out = emit_report(rep, tmp_path / "sub" / "bottleneck", label_key="kind")
    assert read_report(out["json"]) == rep
    rows = out["csv"].read_text().strip().splitlines()
    assert rows[0] == "# config_hash=abc" and rows[1] == "kind,distance,psnr"
    assert len(rows) - 2 == rep.n_items == 7
    assert out["png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_emit_report_is_byte_reproducible(tmp_path):
    a = emit_report(_report(), tmp_path / "a", label_key="kind")
    b = emit_report(_report(), tmp_path / "b", label_key="kind")
    for k in ("json", "csv", "png"):
        assert a[k].read_bytes() == b[k].read_bytes()
    assert json.loads(a["json"].read_text())["metadata"]["config_hash"] == "abc"


def test_bar_chart_cardinality(tmp_path):
    rep = _report(7)
    assert bar_chart(tmp_path / "c.png", rep.per_item["kind"], {"psnr": rep.per_item["psnr"]}) == 7


def test_emit_report_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        emit_report(_report(), blocker / "r")
