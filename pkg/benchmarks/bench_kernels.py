"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--scale 1]

Each kernel runs on identical inputs under both backends. The script prints the
best wall time of ``--repeat`` runs, the speedup, and the largest absolute
difference between the two outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from nsl_lab import kernels
from nsl_lab.geometry import RigCalibration
from nsl_lab.patterns import PatternKind, PatternSpec, generate_pattern
from nsl_lab.simulator import Difficulty, random_scene


def _best(fn, repeat):
    out, best = None, float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _maxdiff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    worst = 0.0
    for x, y in zip(a, b):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        both = np.isfinite(x) & np.isfinite(y)
        if not np.array_equal(np.isfinite(x), np.isfinite(y)):
            return float("inf")
        if both.any():
            worst = max(worst, float(np.abs(x[both] - y[both]).max()))
    return worst


def cases(scale: int):
    w, h = 160 * scale, 96 * scale
    rig = RigCalibration.simple(w, h, 100.0 * scale, 0.1, 0.05)
    pat = generate_pattern(PatternSpec(PatternKind.DOTS_D435, w, h, seed=1)).intensities
    scene = random_scene(3, Difficulty.OCCLUSION, rig)
    types, params, mats = scene.packed()
    K, P = rig.cam_left, rig.projector
    rng = np.random.default_rng(0)
    left = rng.random((h, w))
    ref = np.roll(left, -6, axis=1)
    caps = rng.random((8, h, w))
    refs = np.roll(caps, -4, axis=2)
    yield "render_view", lambda k: k.render_view(
        types, params, mats, 0.0, K.fx, K.fy, K.cx, K.cy, K.width, K.height,
        rig.baseline_lp, P.fx, P.fy, P.cx, P.cy, pat, 1.0, 0.05)
    yield "window_scores zncc", lambda k: k.window_scores(left, ref, 9, 24, kernels.METRIC_ZNCC, 1e-6)
    yield "window_scores sad", lambda k: k.window_scores(left, ref, 9, 24, kernels.METRIC_SAD, 1e-6)
    yield "temporal_scores", lambda k: k.temporal_scores(caps, refs, 16, 0.25)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=int, default=1, help="image size multiplier of 160x96")
    args = ap.parse_args(argv)
    try:
        fast = kernels.get_backend("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    slow = kernels.get_backend("python")
    print(f"{'kernel':<20} {'python s':>10} {'cython s':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in cases(args.scale):
        tp, outp = _best(lambda: fn(slow), args.repeat)
        tc, outc = _best(lambda: fn(fast), args.repeat)
        print(f"{name:<20} {tp:10.4f} {tc:10.4f} {tp / tc:8.1f} {_maxdiff(outp, outc):11.2e}")


if __name__ == "__main__":
    main()
