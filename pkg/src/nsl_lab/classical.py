"""Pixel-domain structured-light decoders.

``block_match`` is the single-shot template-matching baseline: winner-take-all
over a window metric along the epipolar row, parabolic subpixel refinement,
texture and left-right checks. There is no semi-global aggregation.
``temporal_zncc_decode`` decodes a stack of K captures under K different
patterns by correlating per-pixel intensity K-vectors, which is how the
multi-pattern pseudo ground truth is produced.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from nsl_lab import kernels
from nsl_lab.geometry import DepthMap, DisparityMap

INVALID_SCORE = float("nan")


class MatchConfigError(ValueError):
    pass


class Metric(str, enum.Enum):
    ZNCC = "ZNCC"
    SAD = "SAD"


@dataclass(frozen=True)
class BlockMatchConfig:
    window: int = 9
    max_disp: int = 32
    metric: Metric = Metric.ZNCC
    lrc_tol: float | None = None  # None disables the left-right check
    min_texture: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.window < 3 or self.window % 2 == 0:
            raise MatchConfigError("window must be odd and >= 3")
        if self.max_disp < 1:
            raise MatchConfigError("max_disp must be >= 1")


def zncc(a, b) -> float:
    """Zero-normalized cross-correlation; NaN when either vector is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("zncc needs at least two samples")
    za = a - a.mean()
    zb = b - b.mean()
    na = np.sqrt(za @ za)
    nb = np.sqrt(zb @ zb)
    # relative tolerance: a constant vector has rounding-level residuals only
    if na <= 1e-12 * max(1.0, np.abs(a).max()) or nb <= 1e-12 * max(1.0, np.abs(b).max()):
        return INVALID_SCORE
    return float(np.clip((za @ zb) / (na * nb), -1.0, 1.0))


def winner_take_all(scores: np.ndarray, max_disp: int, upper_bound: float | None = None) -> DisparityMap:
    """Argmax over the last axis (ties to the smaller disparity) plus 3-point parabola.

    ``upper_bound`` is the metric's maximum possible score (1 for ZNCC, 0 for
    negated SAD). A winner that attains it is already the continuous maximum,
    so it gets no subpixel offset.
    """
    h, w, nd = scores.shape
    valid = np.isfinite(scores).any(axis=2)
    filled = np.where(np.isfinite(scores), scores, -np.inf)
    best = np.argmax(filled, axis=2)
    s0 = np.take_along_axis(filled, best[..., None], 2)[..., 0]
    lo = np.take_along_axis(filled, np.clip(best - 1, 0, nd - 1)[..., None], 2)[..., 0]
    hi = np.take_along_axis(filled, np.clip(best + 1, 0, nd - 1)[..., None], 2)[..., 0]
    interior = (best > 0) & (best < nd - 1) & np.isfinite(lo) & np.isfinite(hi)
    # a winner whose in-range neighbour was cut off by the image border has no
    # trustworthy subpixel estimate
    cut = ((best > 0) & ~np.isfinite(lo)) | ((best < nd - 1) & ~np.isfinite(hi))
    valid &= ~cut
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = lo - 2.0 * s0 + hi
        off = np.where(interior & (denom < 0), 0.5 * (lo - hi) / denom, 0.0)
    if upper_bound is not None:
        # box-sum rounding leaves a perfect match a hair below the bound
        off = np.where(s0 >= upper_bound - 1e-9, 0.0, off)
    off = np.clip(np.nan_to_num(off), -0.5, 0.5)
    disp = np.clip(best + off, 0.0, float(max_disp))
    disp = np.where(valid, disp, 0.0)
    return DisparityMap(disp, valid)


def _texture_mask(img, window, min_var):
    r = window // 2
    from nsl_lab._kernels_py import _box_sum
    n = window * window
    s = _box_sum(img, r)
    ss = _box_sum(img * img, r)
    var = ss / n - (s / n) ** 2
    return np.nan_to_num(var, nan=-1.0) >= min_var


def _raw_block_match(left, reference, cfg):
    metric = kernels.METRIC_ZNCC if cfg.metric is Metric.ZNCC else kernels.METRIC_SAD
    scores = kernels.window_scores(left, reference, cfg.window, cfg.max_disp, metric,
                                   cfg.min_texture)
    disp = winner_take_all(scores, cfg.max_disp, 1.0 if cfg.metric is Metric.ZNCC else 0.0)
    tex = _texture_mask(left, cfg.window, cfg.min_texture)
    # the true match of a pixel left of max_disp + window/2 may be unreachable
    full_range = np.arange(left.shape[1]) >= cfg.max_disp + cfg.window // 2
    return DisparityMap(disp.values, disp.mask & tex & full_range[None, :])


def block_match(left, reference, cfg: BlockMatchConfig = BlockMatchConfig()) -> DisparityMap:
    """Disparity of ``left`` against a row-rectified ``reference`` (pattern or right IR).

    ``left[i, j]`` is compared with ``reference[i, j - d]`` for ``d`` in
    ``[0, max_disp]``.
    """
    left = np.asarray(left, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if left.shape != reference.shape:
        raise MatchConfigError("left and reference must have the same shape")
    if cfg.max_disp >= left.shape[1]:
        raise MatchConfigError("max_disp must be smaller than the image width")
    dl = _raw_block_match(left, reference, cfg)
    if cfg.lrc_tol is None:
        return dl
    # match the reference back against the left image in mirrored coordinates
    dr = _raw_block_match(reference[:, ::-1], left[:, ::-1], cfg)
    dr = DisparityMap(dr.values[:, ::-1], dr.mask[:, ::-1])
    keep = left_right_consistency(dl, dr, cfg.lrc_tol)
    return DisparityMap(dl.values, dl.mask & keep)


def left_right_consistency(dL: DisparityMap, dR: DisparityMap, tol: float) -> np.ndarray:
    """Valid where ``|dL(x, y) - dR(x - round(dL), y)| <= tol`` and the lookup is in bounds."""
    if dL.values.shape != dR.values.shape:
        raise ValueError("disparity maps must have the same shape")
    h, w = dL.values.shape
    xs = np.arange(w)[None, :] - np.rint(dL.values).astype(np.int64)
    inb = (xs >= 0) & (xs < w)
    xc = np.clip(xs, 0, w - 1)
    rows = np.arange(h)[:, None]
    other = dR.values[rows, xc]
    other_ok = dR.mask[rows, xc]
    return dL.mask & inb & other_ok & (np.abs(dL.values - other) <= tol)


def remove_depth_outliers(Z: DepthMap, grad_thresh: float) -> np.ndarray:
    """Drop pixels whose largest 4-neighbour depth jump exceeds ``grad_thresh``.

    Only valid neighbours count; the input mask is never enlarged.
    """
    z = Z.values
    m = Z.mask
    worst = np.zeros_like(z)
    for axis, step in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb = np.roll(z, step, axis=axis)
        nm = np.roll(m, step, axis=axis)
        edge = [slice(None)] * 2
        edge[axis] = 0 if step == 1 else -1
        nm = nm.copy()
        nm[tuple(edge)] = False
        jump = np.where(nm & m, np.abs(z - nb), 0.0)
        worst = np.maximum(worst, jump)
    return m & (worst <= grad_thresh)


def temporal_zncc_decode(captures, references, max_disp: int,
                         step: float = 0.25) -> DisparityMap:
    """Decode disparity from K registered captures of K projected references.

    Candidates run over ``[0, max_disp]`` in increments of ``step`` pixels,
    with reference columns linearly interpolated, so a capture whose shift is
    fractional still has a candidate it correlates with almost perfectly.
    """
    cap = np.asarray(captures, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    if cap.ndim != 3 or cap.shape != ref.shape:
        raise ValueError(f"captures {cap.shape} and references {ref.shape} must both be (K, H, W)")
    if cap.shape[0] < 2:
        raise ValueError("temporal decoding needs K >= 2")
    if not 0 < step <= 1:
        raise ValueError("step must lie in (0, 1]")
    scores = kernels.temporal_scores(cap, ref, int(max_disp), float(step))
    d = winner_take_all(scores, scores.shape[2] - 1, 1.0)
    # as in block_match: left of max_disp the true candidate may not exist
    full_range = np.arange(cap.shape[2]) >= max_disp
    return DisparityMap(np.clip(d.values * step, 0.0, float(max_disp)), d.mask & full_range)


def pseudo_ground_truth(captures, references, max_disp: int, f: float, B: float,
                        lrc_tol: float = 1.0, grad_thresh: float = 0.05, step: float = 0.25):
    """Multi-pattern pseudo ground truth with occlusion and outlier masking.

    Left-right consistency is applied first, then gradient-outlier removal.
    Returns the disparity map (mask updated) and the matching depth map.
    """
    from nsl_lab.geometry import disparity_to_depth
    cap = np.asarray(captures, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    dl = temporal_zncc_decode(cap, ref, max_disp, step)
    dr = temporal_zncc_decode(ref[:, :, ::-1], cap[:, :, ::-1], max_disp, step)
    dr = DisparityMap(dr.values[:, ::-1], dr.mask[:, ::-1])
    mask = left_right_consistency(dl, dr, lrc_tol)
    disp = DisparityMap(dl.values, mask)
    depth = disparity_to_depth(disp, f, B)
    keep = remove_depth_outliers(depth, grad_thresh)
    return DisparityMap(dl.values, keep), DepthMap(depth.values, keep)
