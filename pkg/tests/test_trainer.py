import dataclasses
import json

import numpy as np
import pytest
import torch

from arit.checkpoint import MAGIC, read_checkpoint, write_checkpoint
from arit.errors import ConfigError, DataError, FormatVersionError, NumericError
from arit.trainer import (
    TrainConfig,
    TrainingData,
    checkpoint_io,
    fast_model,
    init_state,
    load_state,
    save_state,
    to_tensor,
    train,
    translate,
)
from arit.translation import LossWeights, resilient_loss, sample_patch_pairs
from arit.translation.model import forward_full


@pytest.fixture(scope="module")
def tiny_data(lumen_small):
    samples, _ = lumen_small
    clean = {s.frame_id: s.real_image for s in samples}
    noisy = [dataclasses.replace(s, real_image=np.clip(s.real_image + 0.05, 0, 1)) for s in samples]
    return TrainingData.from_samples(noisy[:4], clean, noisy[4:6])


def cfg(**kw):
    return TrainConfig(model=kw.pop("model", fast_model()), epochs=kw.pop("epochs", 1), batch_size=kw.pop("batch_size", 2), **kw)


def test_zero_epochs_is_a_no_op(tiny_data):
    state, log = train(cfg(epochs=0), tiny_data)
    assert log == [] and state.epoch == 0
    fresh = init_state(cfg(epochs=0))
    for a, b in zip(state.model.parameters(), fresh.model.parameters()):
        assert torch.equal(a, b)


@pytest.mark.parametrize("variant", [(True, True), (True, False), (False, False)])
def test_one_epoch_smoke(tiny_data, variant, tmp_path):
    state, log = train(cfg(model=fast_model(*variant)), tiny_data, log_path=tmp_path / "log.jsonl")
    assert len(log) == 1 and log[0]["steps"] == 2
    assert all(np.isfinite(v) for v in log[0]["losses"].values())
    assert {"val_psnr", "val_ssim"} <= set(log[0])
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == log[0]


def test_training_is_deterministic(tiny_data, tmp_path):
    train(cfg(epochs=2, seed=3), tiny_data, log_path=tmp_path / "a.jsonl")
    train(cfg(epochs=2, seed=3), tiny_data, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    train(cfg(epochs=2, seed=4), tiny_data, log_path=tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_resume_matches_uninterrupted_run(tiny_data):
    full, log_full = train(cfg(epochs=2), tiny_data)
    half, _ = train(cfg(epochs=1), tiny_data)
    half.config = cfg(epochs=2)
    resumed, log_rest = train(cfg(epochs=2), tiny_data, state=load_state_roundtrip(half))
    assert log_rest == log_full[1:]
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)


def load_state_roundtrip(state, tmp=None):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "s.arit"
        save_state(p, state)
        return load_state(p)


def test_non_finite_loss_names_the_term(tiny_data):
    bad = TrainingData(tiny_data.noisy.copy(), tiny_data.virtual, tiny_data.pseudo)
    bad.noisy[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="D_y1|x1|cyc|pair|nce"):
        train(cfg(batch_size=4), bad)


def test_missing_pseudo_labels_rejected(tiny_data):
    with pytest.raises(DataError):
        train(cfg(), TrainingData(tiny_data.noisy, tiny_data.virtual))
    # the single-stage baseline trains on N and V alone
    train(cfg(model=fast_model(False, False)), TrainingData(tiny_data.noisy, tiny_data.virtual))


def test_resolution_mismatch_rejected(tiny_data):
    odd = TrainingData(tiny_data.noisy[:, :62, :62], tiny_data.virtual[:, :62, :62], tiny_data.pseudo[:, :62, :62])
    with pytest.raises(DataError):
        train(cfg(), odd)


def test_checkpoints_written_at_interval(tiny_data, tmp_path):
    train(cfg(epochs=3, checkpoint_interval=2), tiny_data, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0002.arit"]


# --------------------------------------------------------------------------- translate


def test_translate_contract(tiny_data):
    state = init_state(cfg())
    assert translate(state, []) == []
    images = [tiny_data.noisy[0], tiny_data.noisy[1][:32, :32]]
    out = translate(state, images)
    assert [o.shape for o in out] == [im.shape for im in images]
    assert all(o.min() >= 0 and o.max() <= 1 for o in out)
    again = translate(state, images)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(out, again))


def test_translate_rejects_wrong_channels():
    state = init_state(cfg())
    with pytest.raises(DataError):
        translate(state, [np.zeros((64, 64, 4), np.float32)])


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_identical(tiny_data, tmp_path):
    state, _ = train(cfg(), tiny_data)
    checkpoint_io(tmp_path / "c.arit", "write", state)
    loaded = checkpoint_io(tmp_path / "c.arit", "read")
    assert loaded.config == state.config and loaded.epoch == 1
    x = tiny_data.val_noisy
    assert translate(state, list(x))[0].tobytes() == translate(loaded, list(x))[0].tobytes()
    for (ka, a), (kb, b) in zip(state.opt_g.state_dict()["state"].items(), loaded.opt_g.state_dict()["state"].items()):
        assert torch.equal(a["exp_avg"], b["exp_avg"]) and torch.equal(a["exp_avg_sq"], b["exp_avg_sq"])


def test_checkpoint_embeds_config(tiny_data, tmp_path):
    state = init_state(cfg(seed=9))
    save_state(tmp_path / "c.arit", state)
    config, blocks = read_checkpoint(tmp_path / "c.arit")
    assert config["train_config"]["seed"] == 9
    assert all(k.startswith(("model/", "opt_g/", "opt_d/")) for k in blocks)


def test_checkpoint_bad_magic_and_version(tmp_path):
    state = init_state(cfg())
    p = tmp_path / "c.arit"
    save_state(p, state)
    data = bytearray(p.read_bytes())
    assert bytes(data[:4]) == MAGIC
    data[:4] = b"XXXX"
    (tmp_path / "m.arit").write_bytes(bytes(data))
    with pytest.raises(FormatVersionError):
        load_state(tmp_path / "m.arit")
    data[:4] = MAGIC
    data[4:8] = (99).to_bytes(4, "little")
    (tmp_path / "v.arit").write_bytes(bytes(data))
    with pytest.raises(FormatVersionError, match="version"):
        load_state(tmp_path / "v.arit")


@pytest.mark.parametrize("cut", [3, 10, 200, -1, -500])
def test_checkpoint_truncation_detected(tmp_path, cut):
    p = tmp_path / "c.arit"
    save_state(p, init_state(cfg()))
    data = p.read_bytes()
    (tmp_path / "t.arit").write_bytes(data[:cut])
    with pytest.raises(FormatVersionError):
        load_state(tmp_path / "t.arit")


def test_checkpoint_block_boundary_truncation(tmp_path):
    write_checkpoint(tmp_path / "a.arit", {"x": 1}, {"a": np.ones(3), "b": np.zeros((2, 2))})
    full = (tmp_path / "a.arit").read_bytes()
    (tmp_path / "b.arit").write_bytes(full[: len(full) - (4 + 1 + 4 + 8 + 16)])
    with pytest.raises(FormatVersionError, match="truncated"):
        read_checkpoint(tmp_path / "b.arit")
    config, blocks = read_checkpoint(tmp_path / "a.arit")
    assert config == {"x": 1} and blocks["b"].shape == (2, 2)


def test_checkpoint_architecture_mismatch(tmp_path):
    save_state(tmp_path / "c.arit", init_state(cfg()))
    with pytest.raises(ConfigError):
        load_state(tmp_path / "c.arit", expected_model=fast_model(False, False))


def test_checkpoints_from_different_epochs_differ(tiny_data, tmp_path):
    train(cfg(epochs=2, checkpoint_interval=1), tiny_data, checkpoint_dir=tmp_path)
    _, a = read_checkpoint(tmp_path / "epoch_0001.arit")
    _, b = read_checkpoint(tmp_path / "epoch_0002.arit")
    va = np.concatenate([v.ravel() for k, v in sorted(a.items()) if k.startswith("model/")])
    vb = np.concatenate([v.ravel() for k, v in sorted(b.items()) if k.startswith("model/")])
    assert va.shape == vb.shape and not np.array_equal(va, vb)


# --------------------------------------------------------------------------- invariants


def test_baseline_instantiates_one_pair_per_direction_and_skips_resilient(tiny_data, monkeypatch):
    import arit.translation.model as model_mod

    calls = []
    real = model_mod.resilient_loss
    monkeypatch.setattr(model_mod, "resilient_loss", lambda *a, **k: calls.append(1) or real(*a, **k))
    state = init_state(cfg(model=fast_model(False, False)))
    assert sorted(state.model.generators) == ["F", "G"] and sorted(state.model.discriminators) == ["D_N", "D_V"]
    assert list(state.model.heads) == ["H"]
    _, log = train(cfg(model=fast_model(False, False)), TrainingData(tiny_data.noisy, tiny_data.virtual))
    assert calls == [] and "nce" in log[0]["losses"]
    train(cfg(), tiny_data)
    assert calls  # the full model does evaluate it


def test_parameter_group_isolation(tiny_data):
    state = init_state(cfg())
    m = state.model
    n, p, v = (to_tensor(a[:2]) for a in (tiny_data.noisy, tiny_data.pseudo, tiny_data.virtual))
    from arit.translation.model import generator_forward
    from arit.translation.losses import discriminator_loss

    out = generator_forward(m, n, p, v)
    d = m.discriminators
    # global-stage discriminator loss must not reach local discriminators, and vice versa
    for name, real in (("D_x2", v), ("D_y2", p)):
        m.zero_grad(set_to_none=True)
        discriminator_loss(d[name](out["fakes"][name].detach()), d[name](real)).backward()
        assert all(q.grad is None for q in d["D_x1"].parameters()) and all(q.grad is None for q in d["D_y1"].parameters())
    for name, real in (("D_x1", p), ("D_y1", n)):
        m.zero_grad(set_to_none=True)
        discriminator_loss(d[name](out["fakes"][name].detach()), d[name](real)).backward()
        assert all(q.grad is None for q in d["D_x2"].parameters()) and all(q.grad is None for q in d["D_y2"].parameters())
    # and the two optimizers own disjoint parameter sets
    ids_g = {id(q) for g in state.opt_g.param_groups for q in g["params"]}
    ids_d = {id(q) for g in state.opt_d.param_groups for q in g["params"]}
    assert not ids_g & ids_d and ids_d == {id(q) for q in m.discriminator_parameters()}


def test_nce_descent_step(tiny_data):
    config = cfg(weights=LossWeights(lam_cyc=0, lam_pair=0, lam_nce=1), lr_g=1e-5)
    state = init_state(config)
    m = state.model
    n = to_tensor(tiny_data.noisy[:2])

    def nce():
        _, _, fn, fv = forward_full(n, m)
        return resilient_loss(sample_patch_pairs(fn, fv.detach(), 64, 64, 0, m.noisy_head, m.virtual_head), 0.07)

    before = nce()
    state.opt_g.zero_grad()
    before.backward()
    state.opt_g.step()
    with torch.no_grad():
        after = nce()
    assert after.item() < before.item()
