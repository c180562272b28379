import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nsl_lab.classical import (BlockMatchConfig, MatchConfigError, Metric, block_match,
                               left_right_consistency, pseudo_ground_truth, remove_depth_outliers,
                               temporal_zncc_decode, winner_take_all, zncc)
from nsl_lab.geometry import DepthMap, DisparityMap, RigCalibration
from nsl_lab.patterns import PatternSpec, alacarte_stack, generate_pattern
from nsl_lab.simulator import (Material, Primitive, RenderConfig, Scene, View, render_ir,
                               render_sample)


def test_zncc_examples(rng):
    v = rng.random(20)
    assert zncc(v, v) == pytest.approx(1.0)
    assert zncc(v, -v) == pytest.approx(-1.0)
    assert zncc(v, 3.0 * v + 2.0) == pytest.approx(1.0)
    assert np.isnan(zncc(np.ones(5), v[:5]))
    with pytest.raises(ValueError):
        zncc(v, v[:-1])


def _zncc_oracle(a, b):
    # textbook scalar loop
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = sum((x - ma) ** 2 for x in a) ** 0.5
    db = sum((y - mb) ** 2 for y in b) ** 0.5
    return num / (da * db)


@given(a=arrays(np.float64, 12, elements=st.floats(-10, 10)),
       b=arrays(np.float64, 12, elements=st.floats(-10, 10)),
       gain=st.floats(0.01, 100), bias=st.floats(-50, 50))
def test_zncc_affine_invariance_and_oracle(a, b, gain, bias):
    if np.ptp(a) < 1e-3 or np.ptp(b) < 1e-3:
        return
    s = zncc(a, b)
    assert s == pytest.approx(_zncc_oracle(list(a), list(b)), abs=1e-9)
    assert zncc(a, gain * b + bias) == pytest.approx(s, abs=1e-9)


def test_block_match_constructed_shift(rng):
    ref = rng.random((40, 96))
    left = np.zeros_like(ref)
    left[:, 7:] = ref[:, :-7]
    d = block_match(left, ref, BlockMatchConfig(window=7, max_disp=16))
    interior = d.mask.copy()
    interior[:, :30] = False
    assert interior.sum() > 0.5 * 40 * 66
    np.testing.assert_allclose(d.values[interior], 7.0, atol=0.01)


def test_block_match_constant_image_invalid():
    img = np.full((20, 40), 0.3)
    assert not block_match(img, img, BlockMatchConfig(window=5, max_disp=8)).mask.any()


def test_block_match_config_errors():
    with pytest.raises(MatchConfigError):
        BlockMatchConfig(window=4)
    with pytest.raises(MatchConfigError):
        BlockMatchConfig(max_disp=0)
    with pytest.raises(MatchConfigError):
        block_match(np.zeros((8, 10)), np.zeros((8, 10)), BlockMatchConfig(window=3, max_disp=10))


def test_sad_metric_constructed_shift(rng):
    ref = rng.random((30, 80))
    left = np.zeros_like(ref)
    left[:, 5:] = ref[:, :-5]
    d = block_match(left, ref, BlockMatchConfig(window=5, max_disp=12, metric=Metric.SAD))
    np.testing.assert_allclose(d.values[d.mask][d.values[d.mask] > 0], 5.0, atol=0.5)


def plane_sample(noise=0.0, kind="dots_d435", z=1.0, seed=0):
    W, H = 128, 64
    rig = RigCalibration.simple(W, H, 100.0, 0.1, 0.05)
    pat = generate_pattern(PatternSpec(kind, W, H, seed=2))
    sc = Scene((Primitive.plane((0, 0, z), (0, 0, -1), Material(albedo=0.9)),),
               ambient_level=0.0, projector_power=1.2)
    return render_sample(sc, RenderConfig(rig, pat, noise_sigma=noise, seed=seed))


def test_block_match_on_simulated_plane():
    s = plane_sample()
    d = block_match(s.ir_left, s.pattern_ref.intensities, BlockMatchConfig(window=9, max_disp=16))
    ok = d.mask & s.disp_gt_lp.mask
    assert ok.sum() > 0
    err = np.abs(d.values[ok] - s.disp_gt_lp.values[ok])
    assert (err <= 0.25).mean() >= 0.99


def test_lrc_examples():
    c = DisparityMap.dense(np.full((6, 20), 3.0))
    m = left_right_consistency(c, c, 0.5)
    assert m[:, 3:].all() and not m[:, :3].any()
    bad = DisparityMap(c.values, np.zeros_like(c.mask))
    assert not left_right_consistency(c, bad, 0.5).any()
    off = DisparityMap.dense(np.full((6, 20), 4.0))
    assert not left_right_consistency(off, c, 0.0).any()


def test_remove_outliers_examples():
    plane = DepthMap.dense(np.full((10, 10), 1.0) + 0.001 * np.arange(10)[None, :])
    assert remove_depth_outliers(plane, 0.1).all()
    spike = plane.values.copy()
    spike[5, 5] = 3.0
    keep = remove_depth_outliers(DepthMap.dense(spike), 0.1)
    bad = ~keep
    assert bad[5, 5]
    neighbours = {(4, 5), (6, 5), (5, 4), (5, 6), (5, 5)}
    assert {tuple(p) for p in np.argwhere(bad)} <= neighbours
    rough = DepthMap.dense(np.random.default_rng(0).random((8, 8)) * 10)
    np.testing.assert_array_equal(remove_depth_outliers(rough, np.inf), rough.mask)


def test_temporal_constructed_shift(rng):
    refs = rng.random((8, 20, 60))
    caps = np.zeros_like(refs)
    caps[:, :, 5:] = refs[:, :, :-5]
    d = temporal_zncc_decode(caps, refs, 12)
    interior = d.mask.copy()
    interior[:, :12] = False
    assert interior.sum() > 0.8 * 20 * 48
    np.testing.assert_allclose(d.values[interior], 5.0, atol=0.01)


def test_temporal_constant_references_invalid():
    refs = np.full((4, 6, 20), 0.5)
    assert not temporal_zncc_decode(refs, refs, 5).mask.any()


def test_temporal_errors(rng):
    with pytest.raises(ValueError):
        temporal_zncc_decode(rng.random((3, 4, 8)), rng.random((3, 4, 9)), 2)
    with pytest.raises(ValueError):
        temporal_zncc_decode(rng.random((1, 4, 8)), rng.random((1, 4, 8)), 2)


def _temporal_epe(noise, seed=0, K=8):
    s = plane_sample(noise)
    refs = alacarte_stack(128, 64, K, seed=1)
    from nsl_lab.simulator import Scene as _S  # noqa: F401
    sc = Scene((Primitive.plane((0, 0, 1.0), (0, 0, -1), Material(albedo=0.9)),), 0.0, 1.2)
    caps = [render_ir(sc, RenderConfig(s.rig, p, noise_sigma=noise, seed=seed + k), View.LEFT)
            for k, p in enumerate(refs)]
    d = temporal_zncc_decode(np.stack(caps), np.stack([p.intensities for p in refs]), 16)
    ok = d.mask & s.disp_gt_lp.mask
    return np.abs(d.values[ok] - s.disp_gt_lp.values[ok]).mean()


def test_temporal_accuracy_monotone_in_noise():
    e = [_temporal_epe(n) for n in (0.0, 0.05, 0.2)]
    assert e[0] <= e[1] <= e[2]


def test_pseudo_gt_plane():
    s = plane_sample()
    refs = alacarte_stack(128, 64, 8, seed=1)
    sc = Scene((Primitive.plane((0, 0, 1.0), (0, 0, -1), Material(albedo=0.9)),), 0.0, 1.2)
    caps = np.stack([render_ir(sc, RenderConfig(s.rig, p, noise_sigma=0.0)) for p in refs])
    d, z = pseudo_ground_truth(caps, np.stack([p.intensities for p in refs]), 16, 100.0, 0.05)
    assert d.mask.mean() > 0.7
    np.testing.assert_allclose(z.values[z.mask], 1.0, rtol=0.01)


def test_wta_ties_to_smaller_and_range():
    scores = np.zeros((1, 1, 5))
    scores[0, 0, [1, 3]] = 1.0
    d = winner_take_all(scores, 4)
    assert d.values[0, 0] == pytest.approx(1.0)


@settings(max_examples=20)
@given(seed=st.integers(0, 1000), md=st.integers(1, 12))
def test_block_match_output_range(seed, md):
    r = np.random.default_rng(seed)
    a, b = r.random((12, 30)), r.random((12, 30))
    d = block_match(a, b, BlockMatchConfig(window=3, max_disp=md))
    assert d.values.min() >= 0 and d.values.max() <= md
