import csv
import math

import numpy as np
import pytest
import torch

from nsl_lab.checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from nsl_lab.neural_matching import MatcherConfig
from nsl_lab.refinement import RefinerConfig
from nsl_lab.training import (OptimConfig, SampleTensors, TrainingAborted, load_matcher,
                              load_refiner, run_loop, save_matcher, train_stage1, train_stage2)

MICRO = MatcherConfig(feature_dim=16, hidden_dim=16, encoder_width=16, iters_train=4, iters_eval=4)


@pytest.fixture(scope="module")
def samples(tiny_dataset):
    return list(tiny_dataset.samples("train"))


def test_overfit_one_sample_stage1(samples, tmp_path):
    opt = OptimConfig(lr=2e-3, steps=300, batch_size=1, crop=(48, 64), jitter=False,
                      pct_start=0.1, ckpt_every=0)
    _, hist = train_stage1(samples[:1], MICRO, opt, tmp_path)
    first = np.mean([h["loss"] for h in hist[:5]])
    last = np.mean([h["loss"] for h in hist[-5:]])
    assert last < 0.1 * first, (first, last)
    rows = list(csv.DictReader(open(tmp_path / "loss_curve.csv")))
    assert len(rows) == 300 and float(rows[0]["loss"]) == pytest.approx(hist[0]["loss"])
    assert max(h["grad_norm_clipped"] for h in hist) <= 0.8 + 1e-5


def test_same_seed_same_checkpoint_bytes(samples, tmp_path):
    opt = OptimConfig(steps=4, batch_size=2, crop=(32, 32), ckpt_every=0, seed=3)
    train_stage1(samples[:4], MICRO, opt, tmp_path / "a")
    train_stage1(samples[:4], MICRO, opt, tmp_path / "b")
    assert file_digest(tmp_path / "a" / "final.ckpt") == file_digest(tmp_path / "b" / "final.ckpt")
    model, meta = load_matcher(tmp_path / "a" / "final.ckpt")
    assert meta["step"] == 4 and model.cfg == MICRO


def test_matcher_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    from nsl_lab.neural_matching import Matcher
    m = Matcher(MICRO)
    save_matcher(tmp_path / "m.ckpt", m, {"note": "x"})
    back, meta = load_matcher(tmp_path / "m.ckpt")
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    assert meta == {"note": "x"}
    with pytest.raises(ValueError):
        load_refiner(tmp_path / "m.ckpt")


def test_checkpoint_container(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5])}
    p = save_checkpoint(tmp_path / "c.ckpt", arrays, {"k": 1}, {"m": [1, 2]})
    got, cfg, meta = load_checkpoint(p)
    assert cfg == {"k": 1} and meta == {"m": [1, 2]}
    for k in arrays:
        assert got[k].dtype == arrays[k].dtype and np.array_equal(got[k], arrays[k])
    raw = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


class _Quadratic(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.full((3,), 5.0))


def _quad_run(samples, opt, loss=None, out_dir=None):
    m = _Quadratic()
    data = SampleTensors(samples[:2])
    saved = []

    def save(path, meta):
        saved.append((path, m.w.detach().clone()))
        save_checkpoint(path, {"w": m.w.detach().numpy()}, {}, meta)

    fn = loss or (lambda b: (m.w ** 2).sum())
    return m, run_loop(m, [{"params": [m.w], "lr": opt.lr}], fn, data, opt, "warmup", save,
                       out_dir), saved


def test_warmup_half_at_step_500(samples):
    opt = OptimConfig(lr=1e-3, steps=1001, batch_size=1, crop=(16, 16), warmup_steps=1000,
                      jitter=False, ckpt_every=0)
    _, hist, _ = _quad_run(samples, opt)
    lr = {h["step"]: h["lr"] for h in hist}
    assert lr[500] == pytest.approx(0.5e-3)
    assert lr[1000] == pytest.approx(1e-3) and lr[1001] == pytest.approx(1e-3)


def test_clip_norm(samples):
    opt = OptimConfig(lr=1e-3, steps=5, batch_size=1, crop=(16, 16), ckpt_every=0)
    _, hist, _ = _quad_run(samples, opt, loss=None)
    assert all(h["grad_norm"] > 0.8 for h in hist)
    assert all(h["grad_norm_clipped"] <= 0.8 + 1e-6 for h in hist)


def test_nan_abort_keeps_last_finite_state(samples, tmp_path):
    calls = {"n": 0}
    holder = {}

    def loss(b):
        calls["n"] += 1
        w = holder["m"].w
        return (w ** 2).sum() * (math.nan if calls["n"] == 3 else 1.0)

    m = _Quadratic()
    holder["m"] = m
    data = SampleTensors(samples[:2])
    opt = OptimConfig(lr=1e-2, steps=10, batch_size=1, crop=(16, 16), ckpt_every=0)
    snapshots = []

    def save(path, meta):
        snapshots.append(m.w.detach().clone())
        save_checkpoint(path, {"w": m.w.detach().numpy()}, {}, meta)

    with pytest.raises(TrainingAborted) as ei:
        run_loop(m, [{"params": [m.w], "lr": opt.lr}], loss, data, opt, "warmup", save, tmp_path)
    assert ei.value.step == 3
    arrays, _, meta = load_checkpoint(ei.value.checkpoint)
    assert meta["aborted"] and meta["step"] == 2
    assert np.all(np.isfinite(arrays["w"]))
    np.testing.assert_array_equal(arrays["w"], m.w.detach().numpy())


def test_stage2_overfit_and_frozen_matcher(samples, tmp_path):
    from nsl_lab.neural_matching import Matcher
    torch.manual_seed(0)
    matcher = Matcher(MICRO)
    before = {k: v.clone() for k, v in matcher.state_dict().items()}
    opt = OptimConfig(lr=2e-3, steps=300, batch_size=1, crop=(48, 64), jitter=False,
                      warmup_steps=20, backbone_lr_ratio=0.1, ckpt_every=0)
    model, hist = train_stage2(samples[:1], matcher, RefinerConfig(backbone_width=8, prompt_width=16),
                               opt, tmp_path, matcher_digest="abc")
    first = np.mean([h["loss"] for h in hist[:5]])
    last = np.mean([h["loss"] for h in hist[-5:]])
    assert last < 0.1 * first, (first, last)
    for k, v in matcher.state_dict().items():
        assert torch.equal(before[k], v), k
    back, meta = load_refiner(tmp_path / "final.ckpt")
    _, cfg, _ = load_checkpoint(tmp_path / "final.ckpt")
    assert cfg["stage1_digest"] == "abc" and back.cfg == model.cfg


def test_stage2_param_groups_ratio(samples):
    from nsl_lab.neural_matching import Matcher
    from nsl_lab.refinement import Refiner
    r = Refiner(RefinerConfig(backbone_width=4, prompt_width=8))
    ids_b = {id(p) for p in r.backbone_parameters()}
    ids_h = {id(p) for p in r.head_parameters()}
    assert not ids_b & ids_h and ids_b | ids_h == {id(p) for p in r.parameters()}


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(crop=(30, 64))
    with pytest.raises(ValueError):
        OptimConfig(lr=0)
    with pytest.raises(ValueError):
        OptimConfig.from_dict({"momentum": 0.9})
    o = OptimConfig(steps=7)
    assert OptimConfig.from_dict(o.to_dict()) == o
