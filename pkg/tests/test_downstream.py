import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from arit.downstream import (
    DepthNet,
    DepthNetSpec,
    RetrievalIndex,
    build_index,
    eval_depth_pipeline,
    register,
    train_depth_net,
)
from arit.errors import DataError, FormatVersionError, NumericError
from arit.imagecore import CameraPose
from arit.metrics import depth_errors
from arit.splatting import default_embedder

SMALL = DepthNetSpec(base_channels=4, epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def pairs(lumen_small):
    samples, _ = lumen_small
    return [(s.virtual_image, s.depth) for s in samples]


def pose(x, y=0.0, z=0.0):
    return CameraPose(np.array([x, y, z]), np.array([1.0, 0, 0, 0]))


# --------------------------------------------------------------------------- depth


def test_zero_epochs_returns_initialized_model(pairs):
    model = train_depth_net(pairs, DepthNetSpec(base_channels=4, epochs=0))
    assert model.losses == [] and model.final_loss is None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        fresh = DepthNet(DepthNetSpec(base_channels=4))
    for a, b in zip(model.net.parameters(), fresh.parameters()):
        assert torch.equal(a, b)


def test_output_is_strictly_positive():
    net = DepthNet(DepthNetSpec(base_channels=4))
    with torch.no_grad():
        net.head.bias.fill_(-50.0)  # push softplus deep into its flat tail
        out = net(torch.rand(2, 3, 16, 16))
    assert out.shape == (2, 16, 16) and torch.all(out > 0)


def test_overfit_one_sample_loss_decreases(pairs):
    model = train_depth_net([pairs[0]] * 10, DepthNetSpec(base_channels=4, epochs=5, batch_size=5))
    assert len(model.losses) == 5
    assert all(b < a for a, b in zip(model.losses, model.losses[1:]))


def test_same_seed_same_final_loss(pairs):
    a = train_depth_net(pairs, SMALL)
    b = train_depth_net(pairs, SMALL)
    assert a.final_loss == b.final_loss
    c = train_depth_net(pairs, DepthNetSpec(base_channels=4, epochs=2, batch_size=4, seed=1))
    assert c.final_loss != a.final_loss


def test_training_rejects_empty_and_non_finite(pairs):
    with pytest.raises(DataError):
        train_depth_net([], SMALL)
    bad = [(pairs[0][0], np.full_like(pairs[0][1], np.nan))]
    with pytest.raises(NumericError):
        train_depth_net(bad, SMALL)


def test_eval_on_training_images_matches_training_set_error(pairs):
    model = train_depth_net(pairs, SMALL)
    images, depths = [p[0] for p in pairs], [p[1] for p in pairs]
    report = eval_depth_pipeline(model, images, depths)
    preds = model.predict(images)
    direct = np.mean([depth_errors(p, g) for p, g in zip(preds, depths)], axis=0)
    for key, value in zip(("abs_rel", "sq_rel", "rmse"), direct):
        assert report.scalars[key] <= value + 1e-9
    assert report.n_items == len(images)


def test_eval_scalars_are_unweighted_means(pairs):
    model = train_depth_net(pairs, DepthNetSpec(base_channels=4, epochs=0))
    report = eval_depth_pipeline(model, [p[0] for p in pairs], [p[1] for p in pairs])
    for key in ("abs_rel", "sq_rel", "rmse"):
        assert np.isclose(report.scalars[key], np.mean(report.per_item[key]), rtol=0, atol=1e-12)


def test_eval_errors(pairs):
    model = train_depth_net(pairs, DepthNetSpec(base_channels=4, epochs=0))
    with pytest.raises(DataError):
        eval_depth_pipeline(model, [], [])
    with pytest.raises(DataError):
        eval_depth_pipeline(model, [pairs[0][0]], [])
    with pytest.raises(DataError):
        eval_depth_pipeline(model, [pairs[0][0]], [pairs[0][1][:32]])


# --------------------------------------------------------------------------- retrieval


@pytest.fixture(scope="module")
def database(lumen_small):
    samples, _ = lumen_small
    return [s.virtual_image for s in samples], [s.pose for s in samples]


def test_single_image_index(database):
    images, poses = database
    index = build_index(images[:1], poses[:1], default_embedder())
    assert len(index) == 1 and index.embeddings.shape == (1, default_embedder().dim)


def test_index_rows_are_unit_norm(database):
    index = build_index(*database, default_embedder())
    assert np.allclose(np.linalg.norm(index.embeddings.astype(np.float64), axis=1), 1.0, atol=1e-5)
    assert len(index.positions) == len(index.embeddings)


def test_rebuild_is_bit_identical(database, tmp_path):
    a = build_index(*database, default_embedder())
    b = build_index(*database, default_embedder())
    a.save(tmp_path / "a.ridx")
    b.save(tmp_path / "b.ridx")
    assert (tmp_path / "a.ridx").read_bytes() == (tmp_path / "b.ridx").read_bytes()


def test_build_index_errors(database):
    images, poses = database
    with pytest.raises(DataError):
        build_index(images[:3], poses[:2], default_embedder())
    with pytest.raises(DataError):
        build_index([], [], default_embedder())
    with pytest.raises(NumericError):
        build_index(None, poses[:1], None, embeddings=np.zeros((1, 4)))


def test_index_file_round_trip(database, tmp_path):
    index = build_index(*database, default_embedder())
    index.save(tmp_path / "i.ridx")
    data = (tmp_path / "i.ridx").read_bytes()
    assert data[:4] == b"RIDX"
    loaded = RetrievalIndex.load(tmp_path / "i.ridx")
    assert loaded.embeddings.tobytes() == index.embeddings.tobytes()
    assert np.array_equal(loaded.positions, index.positions) and loaded.embedder_id == index.embedder_id
    assert all(p == q for p, q in zip(loaded.poses(), database[1]))


def test_index_file_errors(database, tmp_path):
    index = build_index(*database, default_embedder())
    index.save(tmp_path / "i.ridx")
    data = bytearray((tmp_path / "i.ridx").read_bytes())
    cases = {"magic": b"XXXX" + data[4:], "trunc": data[:-7], "head": data[:10]}
    bad_version = bytearray(data)
    bad_version[4:8] = (7).to_bytes(4, "little")
    cases["version"] = bad_version
    for name, blob in cases.items():
        (tmp_path / f"{name}.ridx").write_bytes(bytes(blob))
        with pytest.raises(FormatVersionError):
            RetrievalIndex.load(tmp_path / f"{name}.ridx")


def test_self_retrieval_has_full_recall(database):
    images, poses = database
    emb = default_embedder()
    index = build_index(images, poses, emb)
    report = register(images, poses, index, 5.0, embedder=emb)
    assert report.scalars["recall"] == 1.0
    assert report.per_item["nearest_id"] == list(range(len(images)))
    assert max(report.per_item["distance_mm"]) == 0.0


def test_identical_query_returns_its_id(database):
    images, poses = database
    emb = default_embedder()
    index = build_index(images, poses, emb)
    for i in (0, 3, len(images) - 1):
        assert register([images[i]], [poses[i]], index, embedder=emb).per_item["nearest_id"] == [i]


def test_orthogonal_embeddings_match_hand_argmax():
    db = np.eye(4) * np.array([1.0, 2.0, 3.0, 4.0])[:, None]  # scaling must not matter
    poses = [pose(10.0 * i) for i in range(4)]
    index = build_index(None, poses, None, embeddings=db)
    queries = np.array([[0.9, 0.1, 0, 0], [0, 0.2, 0.7, 0.1], [0, 0, 0.1, 5], [0.3, 0.4, 0.1, 0.2]])
    # brute force: cosine with unit basis vectors is the normalized coordinate
    expected = [int(np.argmax(q / np.linalg.norm(q))) for q in queries]
    assert expected == [0, 2, 3, 1]
    qp = [pose(0.0), pose(20.0), pose(33.0), pose(0.0)]
    report = register(None, qp, index, 5.0, query_embeddings=queries)
    assert report.per_item["nearest_id"] == expected
    assert report.scalars["recall"] == 0.75  # 0, 0 and 3 mm are hits; 10 mm is a miss
    dist = [abs(p.position[0] - 10.0 * e) for p, e in zip(qp, expected)]
    assert report.per_item["distance_mm"] == dist


def test_ties_go_to_lowest_id():
    index = build_index(None, [pose(0), pose(1), pose(2)], None, embeddings=np.array([[0, 1.0], [1.0, 0], [1.0, 0]]))
    assert index.nearest(np.array([[1.0, 0]])).tolist() == [1]


def test_register_errors(database):
    images, poses = database
    index = build_index(images[:2], poses[:2], default_embedder())
    with pytest.raises(DataError):
        register([], [], index, embedder=default_embedder())
    with pytest.raises(DataError):
        register(images[:2], poses[:1], index, embedder=default_embedder())
    empty = RetrievalIndex(np.zeros((0, 3), np.float32), np.zeros((0, 3)), np.zeros((0, 4)), "x")
    with pytest.raises(DataError):
        register(images[:1], poses[:1], empty, embedder=default_embedder())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recall_invariant_under_common_rotation(seed):
    rng = np.random.default_rng(seed)
    d, n, m = 6, 7, 5
    db, queries = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    rot = special_ortho_group.rvs(d, random_state=seed)
    poses = [pose(*rng.uniform(0, 20, 3)) for _ in range(n)]
    qposes = [pose(*rng.uniform(0, 20, 3)) for _ in range(m)]
    a = register(None, qposes, build_index(None, poses, None, embeddings=db), 5.0, query_embeddings=queries)
    b = register(None, qposes, build_index(None, poses, None, embeddings=db @ rot), 5.0, query_embeddings=queries @ rot)
    assert a.scalars["recall"] == b.scalars["recall"]
    assert a.per_item["nearest_id"] == b.per_item["nearest_id"]
