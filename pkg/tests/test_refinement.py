import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nsl_lab.geometry import DepthMap
from nsl_lab.refinement import Refiner, RefinerConfig, fill_invalid, refine, stage2_loss

SMALL = RefinerConfig(backbone_width=4, prompt_width=8)


def model(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return Refiner(cfg)


def t(a):
    return torch.tensor(np.asarray(a, dtype=np.float64))[None, None]


def test_stage2_loss_fixtures():
    D = t([[1, 2], [3, 4]])
    G = t([[1, 2], [3, 5]])
    m = torch.ones_like(D, dtype=torch.bool)
    # L1 = 1/4; x pairs: errors (0,0),(0,1) -> mean 0.5; y pairs: (0,0),(0,1) -> mean 0.5
    assert stage2_loss(D, G, m, 0.5).item() == pytest.approx(0.25 + 0.5 * (0.5 + 0.5))
    assert stage2_loss(D, G, m, 0.0).item() == pytest.approx(0.25)
    assert stage2_loss(G, G, m).item() == 0.0


def test_stage2_loss_constant_offset(rng):
    G = t(rng.uniform(0.5, 3, (6, 7)))
    m = t(rng.random((6, 7)) > 0.3).bool()
    assert stage2_loss(G + 0.37, G, m, 2.0).item() == pytest.approx(0.37, abs=1e-12)


def test_stage2_loss_invalid_pairs_excluded():
    D = t([[0, 0, 9]])
    G = t([[0, 0, 0]])
    m = t([[1, 1, 0]]).bool()
    assert stage2_loss(D, G, m, 1.0).item() == 0.0


def test_stage2_loss_errors():
    z = t(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        stage2_loss(z, z, torch.zeros_like(z, dtype=torch.bool))
    with pytest.raises(ValueError):
        stage2_loss(z, z, torch.ones_like(z, dtype=torch.bool), -1.0)


@given(d=arrays(np.float64, (4, 5), elements=st.floats(-5, 5)),
       g=arrays(np.float64, (4, 5), elements=st.floats(-5, 5)),
       m=arrays(bool, (4, 5)), alpha=st.floats(0, 3))
def test_stage2_loss_nonnegative(d, g, m, alpha):
    if not m.any():
        return
    assert stage2_loss(t(d), t(g), t(m).bool(), alpha).item() >= 0


def test_refine_shape_and_determinism(rng):
    m = model()
    ir = rng.random((40, 56))
    d = DepthMap(rng.uniform(0.5, 2, ir.shape), rng.random(ir.shape) > 0.2)
    a, b = refine(ir, d, m), refine(ir, d, m)
    assert a.values.shape == ir.shape
    assert np.array_equal(a.values, b.values)
    with pytest.raises(ValueError):
        refine(ir[:-1], d, m)


def test_zero_prompt_weights_ignore_d_init(rng):
    m = model()
    for p in m.prompt.parameters():
        torch.nn.init.zeros_(p)
    ir = rng.random((32, 48))
    outs = [refine(ir, DepthMap(rng.uniform(0.1, 9, ir.shape), rng.random(ir.shape) > f), m).values
            for f in (0.0, 0.5, 0.9)]
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_prompt_changes_output(rng):
    m = model()
    ir = rng.random((32, 48))
    a = refine(ir, DepthMap.dense(np.full(ir.shape, 1.0)), m).values
    b = refine(ir, DepthMap.dense(np.full(ir.shape, 2.0)), m).values
    assert not np.array_equal(a, b)


def test_fill_invalid():
    v = np.array([[1.0, 0, 0, 4.0]])
    m = np.array([[True, False, False, True]])
    np.testing.assert_array_equal(fill_invalid(v, m), [[1, 1, 4, 4]])
    np.testing.assert_array_equal(fill_invalid(v, np.zeros_like(m)), np.zeros_like(v))


def test_config_validation():
    with pytest.raises(ValueError):
        RefinerConfig(prompt_convs=2)
    with pytest.raises(ValueError):
        RefinerConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        RefinerConfig.from_dict({"depth": 1})
    assert RefinerConfig.from_dict(SMALL.to_dict()) == SMALL
    assert sum(isinstance(mod, torch.nn.Conv2d) for mod in model().prompt) == 3


@settings(max_examples=5)
@given(h=st.integers(16, 40), w=st.integers(16, 40))
def test_arbitrary_sizes(h, w):
    out = model()(torch.rand(1, 1, h, w), torch.rand(1, 1, h, w), torch.ones(1, 1, h, w))
    assert out.shape == (1, 1, h, w)
