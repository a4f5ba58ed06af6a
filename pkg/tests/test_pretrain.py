import dataclasses
import json
import math

import numpy as np
import pytest

from seqco import numcore as nc
from seqco import pretrain as T
from seqco.augment import AugmentConfig
from seqco.masking import MaskConfig
from seqco.model import ModelConfig
from seqco.objective import EmaConfig
from seqco.synth import generate_synthetic

TINY = ModelConfig(d_model=16, heads=2, enc_layers=1, dec_layers=1, queries=5, proj_dim=8, ffn_hidden=16)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    generate_synthetic(6, 2, d)
    return d


def tiny_cfg(tmp_path, data_dir, **kw):
    base = dict(model=TINY, proposal_mode="ground_truth", steps=6, batch_size=2, dataset=str(data_dir),
                checkpoint=str(tmp_path / "run" / "ck.seqc"), metrics=str(tmp_path / "run" / "m.ndjson"))
    base.update(kw)
    return T.PretrainConfig(**base)


def snapshot(state):
    out = {f"o/{k}": v.data.copy() for k, v in state.online.items()}
    out.update({f"m/{k}": v.data.copy() for k, v in state.momentum.items()})
    out.update({f"am/{k}": v.copy() for k, v in state.adam_m.items()})
    out.update({f"av/{k}": v.copy() for k, v in state.adam_v.items()})
    return out, state.step, state.updates


def assert_same(a, b):
    assert a[1:] == b[1:] and list(a[0]) == list(b[0])
    for k in a[0]:
        assert a[0][k].tobytes() == b[0][k].tobytes(), k


# ---------------------------------------------------------------- config

def test_config_defaults():
    cfg = T.PretrainConfig()
    assert cfg.optimizer == T.OptimizerConfig(1e-4, 0.9, 0.999, 1e-8, 0.1)
    assert cfg.ema.beta == 0.996 and cfg.mask.strategy == "complementary"
    assert (cfg.mask.online, cfg.mask.momentum, cfg.mask.patch) == (0.7, 0.3, 16)
    assert cfg.steps == 300 and cfg.proposal_top == 30


def test_config_round_trip(tmp_path):
    cfg = T.PretrainConfig(steps=12, mask=MaskConfig(online=(0.5, 0.9), patch=(8, 32)), seed=3)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = T.load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert T.PretrainConfig.from_dict({}) == T.PretrainConfig()


def test_config_rejections(tmp_path):
    with pytest.raises(ValueError, match="bogus"):
        T.PretrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="config.model"):
        T.PretrainConfig.from_dict({"model": {"depth": 3}})
    with pytest.raises(ValueError):
        T.PretrainConfig.from_dict({"steps": 0})
    with pytest.raises(ValueError):
        T.PretrainConfig.from_dict({"augment": {"output_size": 32}})
    with pytest.raises(ValueError):
        T.PretrainConfig.from_dict({"optimizer": {"lr": -1}})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ValueError, match="invalid JSON"):
        T.load_config(bad)


def test_missing_dataset_is_rejected(tmp_path):
    cfg = T.PretrainConfig(dataset=str(tmp_path / "nope"))
    with pytest.raises(FileNotFoundError, match="nope"):
        T.run_pretrain(cfg)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        T.load_dataset(tmp_path)
    generate_synthetic(1, 0, tmp_path)
    next(tmp_path.glob("*.gt.json")).unlink()
    with pytest.raises(FileNotFoundError, match="gt.json"):
        T.load_dataset(tmp_path, "ground_truth")
    scenes = T.load_dataset(tmp_path, "random", top=7, seed=1)
    assert scenes[0].gt_boxes is None and scenes[0].proposals.shape == (7, 4)


def test_batch_indices_are_epoch_permutations():
    n, b = 10, 3
    steps_per_epoch = n // b
    for epoch in range(3):
        seen = np.concatenate([T.batch_indices(epoch * steps_per_epoch + j + 1, n, b, 5)
                               for j in range(steps_per_epoch)])
        assert len(set(seen.tolist())) == len(seen) == steps_per_epoch * b
    np.testing.assert_array_equal(T.batch_indices(4, n, b, 5), T.batch_indices(4, n, b, 5))
    assert len(T.batch_indices(1, 2, 8, 0)) == 2


# ---------------------------------------------------------------- optimizer pieces

def test_clip_grads_oracle(rng):
    grads = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=4)}
    norm = math.sqrt(sum((g ** 2).sum() for g in grads.values()))
    orig = {k: v.copy() for k, v in grads.items()}
    assert T.clip_grads(grads, 0.1) == pytest.approx(norm)
    clipped = math.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert clipped == pytest.approx(0.1, rel=1e-5)
    np.testing.assert_allclose(grads["a"] / orig["a"], 0.1 / (norm + 1e-6))
    small = {"a": np.full(2, 1e-3)}
    T.clip_grads(small, 0.1)
    np.testing.assert_array_equal(small["a"], np.full(2, 1e-3))


def test_adam_matches_scalar_recurrence():
    opt = T.OptimizerConfig(lr=0.01)
    p = nc.Tensor(np.array([0.5]), dtype=np.float64)
    state = T.TrainState({"w": p}, {}, {"w": np.zeros(1)}, {"w": np.zeros(1)})
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -0.1, 0.7], start=1):
        T.adam_update(state, {"w": np.array([g])}, opt)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(theta, rel=1e-12)
    assert state.updates == 3


# ---------------------------------------------------------------- steps

def samples_for(cfg, step=1):
    scenes = T.load_dataset(cfg.dataset, "ground_truth")
    return [T.build_sample(s, step, cfg) for s in scenes[:2]]


def test_sample_contract(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir)
    for s in samples_for(cfg):
        assert s.view1.shape == s.view2.shape == (3, 64, 64)
        assert len(s.proposals) <= TINY.queries and np.all((s.proposals >= 0) & (s.proposals <= 1))


def test_step_is_pure(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir)
    a, b = T.init_state(cfg), T.init_state(cfg)
    ra = T.train_step(a, samples_for(cfg), cfg, 1)
    rb = T.train_step(b, samples_for(cfg), cfg, 1)
    assert ra == rb
    assert_same(snapshot(a), snapshot(b))
    assert set(ra) >= {"step", "loss_total", "loss_focal", "loss_box", "loss_ssl", "n_matched"}
    assert ra["loss_total"] == pytest.approx(ra["loss_rps"] + ra["loss_ssl"], rel=1e-5)


def test_beta_one_freezes_momentum(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir, ema=EmaConfig(beta=1.0))
    state = T.init_state(cfg)
    before = {k: v.data.tobytes() for k, v in state.momentum.items()}
    for step in (1, 2, 3):
        T.train_step(state, samples_for(cfg, step), cfg, step)
    assert all(state.momentum[k].data.tobytes() == before[k] for k in before)
    assert any(state.online[k].data.tobytes() != before[k] for k in before)


def test_momentum_lags_online(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir, ema=EmaConfig(beta=0.5), precision="float64")
    with nc.precision(np.float64):
        state = T.init_state(cfg)
        T.train_step(state, samples_for(cfg, 1), cfg, 1)
        for step in (2, 3):
            prev = {k: v.data.copy() for k, v in state.momentum.items()}
            T.train_step(state, samples_for(cfg, step), cfg, step)
            for k, m in state.momentum.items():
                o = state.online[k].data
                lo, hi = np.minimum(prev[k], o), np.maximum(prev[k], o)
                differ = np.abs(prev[k] - o) > 1e-12 * np.maximum(1, np.abs(o))
                assert np.all((m.data[differ] > lo[differ]) & (m.data[differ] < hi[differ]))


def test_momentum_params_get_no_gradient(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir)
    state = T.init_state(cfg)
    loss, _, _ = T.compute_loss(state, samples_for(cfg), cfg)
    grads = nc.backward(loss)
    assert not any(t in grads for t in state.momentum.values())
    assert any(t in grads for t in state.online.values())


def test_non_finite_loss_leaves_state_unchanged(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir)
    state = T.init_state(cfg)
    state.online["head.cls.fc3.weight"].data[:] = np.nan
    before = snapshot(state)
    with pytest.raises(T.NonFiniteLoss):
        T.train_step(state, samples_for(cfg), cfg, 1)
    after = snapshot(state)
    assert after[1:] == before[1:]
    for k in before[0]:
        np.testing.assert_array_equal(after[0][k], before[0][k])


def test_loop_logs_and_skips_non_finite_step(tmp_path, data_dir, monkeypatch):
    cfg = tiny_cfg(tmp_path, data_dir, steps=3)
    real = T.train_step

    def flaky(state, samples, cfg, step):
        if step == 2:
            raise T.NonFiniteLoss("step 2: loss is nan")
        return real(state, samples, cfg, step)

    monkeypatch.setattr(T, "train_step", flaky)
    state = T.run_pretrain(cfg)
    recs = T.read_metrics(cfg.metrics)
    assert [r["step"] for r in recs] == [1, 2, 3]
    assert "error" in recs[1] and "error" not in recs[2]
    assert state.step == 3 and state.updates == 2


# ---------------------------------------------------------------- runs, checkpoints, resume

def test_runs_are_deterministic_and_resumable(tmp_path, data_dir):
    a = tiny_cfg(tmp_path / "a", data_dir)
    b = tiny_cfg(tmp_path / "b", data_dir)
    sa, sb = T.run_pretrain(a), T.run_pretrain(b)
    text = open(a.metrics).read()
    assert text == open(b.metrics).read()
    recs = T.read_metrics(a.metrics)
    assert [r["step"] for r in recs] == list(range(1, 7))
    assert all(math.isfinite(r["loss_total"]) for r in recs)
    assert_same(snapshot(sa), snapshot(sb))

    c = tiny_cfg(tmp_path / "c", data_dir)
    T.run_pretrain(c, stop_at=3)
    assert len(T.read_metrics(c.metrics)) == 3
    resumed = T.run_pretrain(c, resume=c.checkpoint)
    assert open(c.metrics).read() == text
    assert_same(snapshot(resumed), snapshot(sa))


def test_state_round_trip(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir)
    state = T.init_state(cfg)
    T.train_step(state, samples_for(cfg), cfg, 1)
    T.save_state(state, tmp_path / "s.seqc")
    back = T.load_state(tmp_path / "s.seqc", cfg)
    assert_same(snapshot(back), snapshot(state))
    assert all(t.requires_grad for t in back.online.values())
    other = dataclasses.replace(cfg, model=dataclasses.replace(TINY, queries=6))
    with pytest.raises(T.checkpoint.CheckpointError):
        T.load_state(tmp_path / "s.seqc", other)
    raw = (tmp_path / "s.seqc").read_bytes()
    (tmp_path / "t.seqc").write_bytes(raw[:-7])
    with pytest.raises(T.checkpoint.CheckpointError, match="byte"):
        T.load_state(tmp_path / "t.seqc", cfg)


# ---------------------------------------------------------------- evaluation

def test_evaluate_matching(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir)
    scenes = T.load_dataset(data_dir, "ground_truth")
    state = T.init_state(cfg)
    with pytest.raises(ValueError):
        T.evaluate_matching(state, [], cfg)
    report = T.evaluate_matching(state, scenes, cfg)
    assert report["scenes"] == len(scenes) == len(report["per_scene"])
    for key in ("recall", "mean_iou", "fg_prob", "pair_l2"):
        assert math.isfinite(report[key])
    assert 0 <= report["recall"] <= 1 and 0 < report["fg_prob"] < 1
    json.dumps(report)


def test_identical_branches_have_zero_pair_distance(tmp_path, data_dir):
    cfg = tiny_cfg(tmp_path, data_dir, mask=MaskConfig(strategy="none"),
                   augment=AugmentConfig(photometric=False))
    report = T.evaluate_matching(T.init_state(cfg), T.load_dataset(data_dir, "ground_truth"), cfg)
    assert report["pair_l2"] == 0.0
