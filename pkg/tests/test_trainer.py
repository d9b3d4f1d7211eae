import csv
import math

import numpy as np
import pytest

from xreid.checkpoint import CheckpointError, read_arrays
from xreid.evaluation import evaluate
from xreid.model import LOSS_NAMES, Toggles, XReID, cross_partners
from xreid.nn import Adam, lr_at
from xreid.synthdata import IR, VIS, SynthConfig, generate
from xreid.trainer import (STEP_HEADER, BatchSpec, DivergenceError, SamplingError, TrainConfig,
                           build_memories, build_model, load_checkpoint, sample_batch, save_checkpoint,
                           train)


@pytest.fixture(scope="module")
def ds():
    return generate(SynthConfig(n_ids=6, clips_per_modality=4, seed=11))


def tiny_cfg(**kw):
    base = dict(epochs=1, steps_per_epoch=2, seed=0, eval_every_epoch=False)
    base.update(kw)
    return TrainConfig(**base)


def batch_and_model(ds, toggles=None, seed=0):
    cfg = tiny_cfg(toggles=toggles or Toggles(), seed=seed)
    model = build_model(cfg, ds)
    mems = build_memories(model, ds.split("train"), ds.n_ids, cfg.mu)
    batch = sample_batch(ds.split("train"), BatchSpec(4, 2, ds.T), np.random.default_rng(seed))
    return model, mems, batch


# sampler

def test_sample_batch_composition(ds):
    batch = sample_batch(ds.split("train"), BatchSpec(4, 2, 4), np.random.default_rng(0))
    assert len(batch) == 16
    ids = [c.identity for c in batch]
    assert len(set(ids)) == 4 and all(ids.count(y) == 4 for y in set(ids))
    assert sum(c.modality == VIS for c in batch) == 8
    for y in set(ids):
        per = [c for c in batch if c.identity == y]
        assert len({c.clip_id for c in per}) == 4
        assert sum(c.modality == IR for c in per) == 2


def test_sample_batch_exactly_p_identities():
    small = generate(SynthConfig(n_ids=4, clips_per_modality=4, seed=1))
    batch = sample_batch(small.split("train"), BatchSpec(4, 2, 4), np.random.default_rng(5))
    assert {c.identity for c in batch} == {0, 1, 2, 3}


def test_sample_batch_deterministic(ds):
    a = sample_batch(ds.clips, BatchSpec(), np.random.default_rng(9))
    b = sample_batch(ds.clips, BatchSpec(), np.random.default_rng(9))
    assert [c.clip_id for c in a] == [c.clip_id for c in b]


def test_sample_batch_insufficient(ds):
    clips = [c for c in ds.split("train") if not (c.identity == 3 and c.modality == IR and c.clip_index == 1)]
    with pytest.raises(SamplingError, match=r"\(3, 'IR'\)"):
        sample_batch(clips, BatchSpec(P=6, K=2), np.random.default_rng(0))


# composite loss

def test_only_ce_gives_ce(ds):
    model, mems, batch = batch_and_model(ds, Toggles(cpc=False, mii=False, tri=False))
    total, report, _ = model.losses(batch, mems)
    assert report["l_tri"] == report["l_cpcl"] == report["l_cmcl"] == 0.0
    assert float(total.data) == report["l_ce"]


def test_report_sums_to_total(ds):
    model, mems, batch = batch_and_model(ds)
    total, report, _ = model.losses(batch, mems, tau=0.5)
    assert all(report[k] > 0 for k in LOSS_NAMES)
    assert abs(sum(report[k] for k in LOSS_NAMES) - float(total.data)) < 1e-12


@pytest.mark.parametrize("name,key", [("cpc", "l_cpcl"), ("cii", "l_cmcl"), ("tri", "l_tri"), ("ce", "l_ce")])
def test_toggle_removes_exactly_its_term(ds, name, key):
    model, mems, batch = batch_and_model(ds)
    full, rep, _ = model.losses(batch, mems)
    setattr(model.toggles, name, False)
    without, rep2, _ = model.losses(batch, mems)
    assert rep2[key] == 0.0
    assert abs(float(full.data) - float(without.data) - rep[key]) < 1e-12


def test_loss_reproducible_bitwise(ds):
    vals = []
    for _ in range(2):
        model, mems, batch = batch_and_model(ds, seed=3)
        total, _, _ = model.losses(batch, mems)
        total.backward()
        vals.append((float(total.data), model.encoder.patch_embed.w.grad.copy()))
    assert vals[0][0] == vals[1][0]
    np.testing.assert_array_equal(vals[0][1], vals[1][1])


def test_initial_losses_finite_and_ce_near_log_y(ds):
    model, mems, batch = batch_and_model(ds)
    total, report, fw = model.losses(batch, mems)
    assert math.isfinite(float(total.data))
    # per sample |CE - ln Y| is bounded by the spread of its logits
    z = fw.train_feature.data @ model.classifier.data
    spread = z.max(axis=1) - z.min(axis=1)
    assert abs(report["l_ce"] - math.log(ds.n_ids)) <= spread.mean()


def test_zero_lr_step_is_a_no_op(ds):
    model, mems, batch = batch_and_model(ds)
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    feat0 = model.embed(batch)
    opt = Adam(model.parameters(), lr=0.0)
    total, _, _ = model.losses(batch, mems)
    total.backward()
    opt.step()
    for k, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[k])
    np.testing.assert_array_equal(model.embed(batch), feat0)


def test_cross_partners_lowest_clip_id():
    ids = [0, 0, 0, 1, 1]
    mods = [VIS, IR, IR, VIS, IR]
    cids = [10, 31, 30, 40, 41]
    np.testing.assert_array_equal(cross_partners(ids, mods, cids), [2, 0, 0, 4, 3])
    with pytest.raises(ValueError):
        cross_partners([0, 1], [VIS, IR], [0, 1])


def test_cii_not_run_at_inference(ds):
    model, _, batch = batch_and_model(ds)
    model.embed(batch)
    assert model.mii.cii_calls == 0
    emb = model.embed(ds.split("test"))
    assert emb.shape[1] == 32 + 64
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(model.embed(ds.split("test")), emb)
    assert model.mii.cii_calls == 0


# schedule and optimizer

def test_lr_schedule_shape():
    base = 1e-3
    assert lr_at(0, 100, base) == pytest.approx(1e-4)
    assert lr_at(5, 100, base) == pytest.approx(base * (0.1 + 0.9 * 0.5))
    assert lr_at(10, 100, base) == base and lr_at(74, 100, base) == base
    assert lr_at(75, 100, base) == pytest.approx(1e-4) and lr_at(99, 100, base) == pytest.approx(1e-4)


def test_adam_first_step_is_signed_lr():
    from xreid.tensor import Tensor
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -4.0, 0.0])
    Adam([p], lr=0.1).step()
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], atol=1e-7)


# training loop

def test_train_plumbing(ds, tmp_path):
    res = train(ds, tiny_cfg(), out_dir=tmp_path)
    assert (tmp_path / "ckpt").exists()
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == STEP_HEADER
    assert len(rows) == 3
    assert all(len(r[2].split(".")[1]) == 6 for r in rows[1:])
    for mem in res.memories.values():
        np.testing.assert_allclose(np.linalg.norm(mem.entries, axis=1), 1.0, atol=1e-9)


def test_train_deterministic(ds, tmp_path):
    for name in ("a", "b"):
        train(ds, tiny_cfg(steps_per_epoch=3), out_dir=tmp_path / name)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "ckpt").read_bytes() == (tmp_path / "b" / "ckpt").read_bytes()


def test_divergence_guard(ds, monkeypatch):
    orig = XReID.losses
    calls = {"n": 0}

    def poisoned(self, *a, **k):
        total, report, fw = orig(self, *a, **k)
        calls["n"] += 1
        if calls["n"] == 2:
            report["l_total"] = float("nan")
        return total, report, fw

    monkeypatch.setattr(XReID, "losses", poisoned)
    with pytest.raises(DivergenceError, match="step 1"):
        train(ds, tiny_cfg(steps_per_epoch=4))


def test_loss_descends_on_separable_data():
    data = generate(SynthConfig(n_ids=8, clips_per_modality=4, jitter=0.0, noise=0.0, p_occ=0.0, seed=0))
    for seed in (1, 2, 3):
        res = train(data, TrainConfig(epochs=4, steps_per_epoch=50, lr=1e-3, seed=seed, eval_every_epoch=False))
        first = np.mean([s["l_total"] for s in res.steps[:10]])
        last = np.mean([s["l_total"] for s in res.steps[-10:]])
        assert last < first, (seed, first, last)


# checkpoints

def test_checkpoint_round_trip(ds, tmp_path):
    res = train(ds, tiny_cfg(lii_stride=1), out_dir=tmp_path)
    names = read_arrays(tmp_path / "ckpt")
    assert "mem.vis.0" in names and f"mem.ir.{ds.n_ids - 1}" in names
    for prefix in ("mii.sii.", "mii.lii.", "mii.cii.", "enc."):
        assert any(k.startswith(prefix) for k in names)
    model, mems = load_checkpoint(tmp_path / "ckpt", ds)
    assert model.lii_stride == 1
    np.testing.assert_array_equal(model.embed(ds.split("test")), res.model.embed(ds.split("test")))
    for k in ("vis", "ir"):
        np.testing.assert_array_equal(mems[k].entries, res.memories[k].entries)
    assert evaluate(model, ds.split("test")) == evaluate(res.model, ds.split("test"))


def test_checkpoint_dataset_mismatch(ds, tmp_path):
    model = build_model(tiny_cfg(), ds)
    save_checkpoint(tmp_path / "ckpt", model, None, ds.T)
    other = generate(SynthConfig(n_ids=5, clips_per_modality=2, seed=1))
    with pytest.raises(CheckpointError, match="Y=6"):
        load_checkpoint(tmp_path / "ckpt", other)


def test_checkpoint_shape_mismatch(ds, tmp_path):
    from xreid.checkpoint import write_arrays
    model = build_model(tiny_cfg(), ds)
    save_checkpoint(tmp_path / "ckpt", model, None, ds.T)
    arrays = read_arrays(tmp_path / "ckpt")
    arrays["enc.proj.w"] = np.zeros((64, 16))
    write_arrays(arrays, tmp_path / "bad")
    with pytest.raises(CheckpointError, match="enc.proj.w"):
        load_checkpoint(tmp_path / "bad", ds)
