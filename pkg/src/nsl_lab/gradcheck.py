"""Analytic-vs-numeric gradient comparison on sampled parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int, float, float]   # name, flat index, analytic, numeric
    groups: tuple[str, ...]
    n_kinks: int = 0                        # draws replaced because a kink lay within +-eps


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _central(flat, idx, loss_fn, orig, h):
    flat[idx] = orig + h
    up = loss_fn().item()
    flat[idx] = orig - h
    down = loss_fn().item()
    flat[idx] = orig
    return (up - down) / (2 * h)


def _probe(flat, idx, loss_fn, base, eps):
    """Central difference at the largest step in (eps, eps/10, eps/100) free of kinks.

    On a smooth stretch the central differences at h and h/2 agree to
    O(h^2); a kink inside [-h, h] breaks that. The allowance includes the
    rounding error of the loss itself.
    """
    orig = flat[idx].item()
    for h in (eps, eps / 10, eps / 100):
        c1 = _central(flat, idx, loss_fn, orig, h)
        c2 = _central(flat, idx, loss_fn, orig, h / 2)
        roundoff = 8 * np.finfo(np.float64).eps * abs(base) / h
        if abs(c1 - c2) <= 1e-5 * max(abs(c1), abs(c2)) + roundoff:
            return c1
    return None


def check_gradients(model: torch.nn.Module, loss_fn, n_params: int = 200, eps: float = 1e-5,
                    seed: int = 0, floor: float = 1e-6) -> GradCheckResult:
    """Compare autograd against central differences ``(L(p+eps) - L(p-eps)) / 2eps``.

    Every parameter tensor is sampled at least once; the remaining draws are
    uniform over all scalar parameters. ``floor`` keeps gradients that are
    zero up to rounding from dominating the relative error.

    ReLU and the floor inside the cost-volume lookup make the loss piecewise
    smooth. A draw whose central differences at ``eps`` and ``eps/2``
    disagree has a kink nearby; the step is shrunk tenfold (twice at most) and, if the kink
    persists, the draw is replaced by another entry of the same tensor and
    counted in ``n_kinks``.
    """
    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    # unused parameters (e.g. the convex-upsampling head under bilinear) have zero gradient
    grads = {k: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for k, p in named}
    rng = np.random.default_rng(seed)
    picks = [(k, int(rng.integers(p.numel()))) for k, p in named]
    sizes = np.array([p.numel() for _, p in named], dtype=float)
    while len(picks) < n_params:
        i = int(rng.choice(len(named), p=sizes / sizes.sum()))
        k, p = named[i]
        picks.append((k, int(rng.integers(p.numel()))))
    params = dict(named)
    worst, max_err, kinks = None, -1.0, 0
    with torch.no_grad():
        base = loss_fn().item()
        for k, idx in picks:
            flat = params[k].view(-1)
            for _ in range(20):
                num = _probe(flat, idx, loss_fn, base, eps)
                if num is not None:
                    break
                kinks += 1
                idx = int(rng.integers(flat.numel()))
            else:
                continue
            ana = grads[k].view(-1)[idx].item()
            err = relative_error(ana, num, floor)
            if err > max_err:
                max_err, worst = err, (k, idx, ana, num)
    return GradCheckResult(max_err, len(picks), worst, tuple(k for k, _ in named), kinks)


def micro_matcher_check(mode: str = "mono", n_params: int = 200, seed: int = 0) -> GradCheckResult:
    """Sequence loss of a tiny double-precision matcher on a 16x32 random sample."""
    from nsl_lab.neural_matching import Matcher, MatcherConfig, sequence_loss

    torch.manual_seed(seed)
    cfg = MatcherConfig(mode=mode, feature_dim=8, hidden_dim=8, encoder_width=8, iters_train=2,
                        iters_eval=2, pyramid_levels=2, lookup_radius=2, upsample="bilinear")
    model = Matcher(cfg).double().train()
    g = torch.Generator().manual_seed(seed)
    x = lambda: torch.rand(1, 1, 16, 32, generator=g, dtype=torch.float64)
    left, pattern, right = x(), x(), x()
    gt = 4 * x()
    mask = x() > 0.2
    ratio = torch.tensor([0.5], dtype=torch.float64)

    def loss_fn():
        return sequence_loss(model(left, pattern=pattern, right=right, ratio=ratio, iters=2),
                             gt, mask, cfg.loss_gamma)

    return check_gradients(model, loss_fn, n_params, seed=seed)


def micro_refiner_check(n_params: int = 200, seed: int = 0) -> GradCheckResult:
    from nsl_lab.refinement import Refiner, RefinerConfig, stage2_loss

    torch.manual_seed(seed)
    model = Refiner(RefinerConfig(backbone_width=4, prompt_width=8)).double().train()
    g = torch.Generator().manual_seed(seed)
    x = lambda: torch.rand(1, 1, 16, 32, generator=g, dtype=torch.float64)
    ir, d_init = x(), 0.5 + 2 * x()
    valid = x() > 0.1
    gt, mask = 0.5 + 2 * x(), x() > 0.2

    def loss_fn():
        return stage2_loss(model(ir, d_init, valid), gt, mask, 0.5)

    return check_gradients(model, loss_fn, n_params, seed=seed)
