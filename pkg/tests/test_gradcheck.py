import time

import pytest
import torch

from nsl_lab.gradcheck import check_gradients, micro_matcher_check, micro_refiner_check, relative_error


@pytest.mark.parametrize("mode", ["mono", "stereo", "bino"])
def test_matcher_gradients(mode):
    t0 = time.perf_counter()
    r = micro_matcher_check(mode, n_params=200)
    assert r.n_checked >= 200
    assert r.max_rel_error < 1e-4, r.worst
    assert time.perf_counter() - t0 < 300


def test_refiner_gradients():
    r = micro_refiner_check(n_params=200)
    assert r.n_checked >= 200
    assert r.max_rel_error < 1e-4, r.worst
    assert any("prompt" in g for g in r.groups)


def test_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # true derivative is 2x

    m = torch.nn.Linear(4, 1).double()
    r = check_gradients(m, lambda: Bad.apply(m.weight) + m.bias.sum(), n_params=5)
    assert r.max_rel_error > 0.1


def test_relative_error_floor():
    assert relative_error(1.0, 1.0, 1e-8) == 0.0
    assert relative_error(0.0, 1e-12, 1e-8) < 1e-3
