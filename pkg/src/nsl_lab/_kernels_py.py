"""Pure-numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when the extension is unavailable or ``NSL_LAB_BACKEND=python`` is set.
"""
from __future__ import annotations

import numpy as np

PLANE, SPHERE, BOX = 0, 1, 2
T_MIN = 1e-6
_BIG = np.inf


def intersect(types, params, origins, dirs, t_max=None):
    """Nearest hit per ray.

    Returns ``(t, prim_index, normal)``; misses have ``t = inf`` and index -1.
    Normals of planes are flipped to face the incoming ray.
    """
    n = origins.shape[0]
    best_t = np.full(n, _BIG)
    best_i = np.full(n, -1, dtype=np.int64)
    best_n = np.zeros((n, 3))
    limit = np.full(n, _BIG) if t_max is None else np.asarray(t_max, dtype=np.float64)

    for i in range(len(types)):
        p = params[i]
        kind = int(types[i])
        normal = np.zeros((n, 3))
        if kind == PLANE:
            p0, nn = p[:3], p[3:6]
            denom = dirs @ nn
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((p0 - origins) @ nn) / denom
            t = np.where(np.abs(denom) > 1e-12, t, _BIG)
            sign = np.where(denom > 0, -1.0, 1.0)
            normal[:] = nn[None, :] * sign[:, None]
        elif kind == SPHERE:
            c, r = p[:3], p[3]
            oc = origins - c
            b = np.einsum("ij,ij->i", oc, dirs)
            cc = np.einsum("ij,ij->i", oc, oc) - r * r
            disc = b * b - cc
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > T_MIN, t0, t1)
            t = np.where(disc >= 0, t, _BIG)
            # misses carry t = inf; their normals are never read
            with np.errstate(invalid="ignore"):
                hit = origins + t[:, None] * dirs
            normal = (hit - c) / r
        elif kind == BOX:
            lo, hi = p[:3], p[3:6]
            tnear = np.full(n, -_BIG)
            tfar = np.full(n, _BIG)
            near_axis = np.zeros(n, dtype=np.int64)
            far_axis = np.zeros(n, dtype=np.int64)
            miss = np.zeros(n, dtype=bool)
            for ax in range(3):
                dd = dirs[:, ax]
                oo = origins[:, ax]
                par = np.abs(dd) < 1e-12
                miss |= par & ((oo < lo[ax]) | (oo > hi[ax]))
                with np.errstate(divide="ignore", invalid="ignore"):
                    ta = (lo[ax] - oo) / dd
                    tb = (hi[ax] - oo) / dd
                t1 = np.where(par, -_BIG, np.minimum(ta, tb))
                t2 = np.where(par, _BIG, np.maximum(ta, tb))
                upd = t1 > tnear
                tnear = np.where(upd, t1, tnear)
                near_axis = np.where(upd, ax, near_axis)
                upd = t2 < tfar
                tfar = np.where(upd, t2, tfar)
                far_axis = np.where(upd, ax, far_axis)
            ok = (~miss) & (tnear <= tfar)
            use_near = tnear > T_MIN
            t = np.where(use_near, tnear, tfar)
            t = np.where(ok, t, _BIG)
            axis = np.where(use_near, near_axis, far_axis)
            comp = dirs[np.arange(n), axis]
            sgn = np.where(use_near, -np.sign(comp), np.sign(comp))
            normal[np.arange(n), axis] = sgn
        else:
            raise ValueError(f"unknown primitive type {kind}")
        take = (t > T_MIN) & (t < best_t) & (t < limit)
        best_t = np.where(take, t, best_t)
        best_i = np.where(take, i, best_i)
        best_n = np.where(take[:, None], normal, best_n)
    return best_t, best_i, best_n


def _bilinear_zero(img, x, y):
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros_like(x)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xx = x0 + dx
            yy = y0 + dy
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            val = np.zeros_like(x)
            val[ok] = img[yy[ok], xx[ok]]
            out += wx * wy * val
    return out


def render_view(types, params, materials, cam_x, fx, fy, cx, cy, width, height,
                proj_x, pfx, pfy, pcx, pcy, pattern, power, ambient):
    """Ray-cast one view of the scene.

    Returns ``(radiance, depth, shadowed)``: linear radiance before gamma and
    noise, z-depth (0 where the ray misses) and the shadow-ray occlusion flag.
    """
    types = np.asarray(types, dtype=np.int64)
    params = np.asarray(params, dtype=np.float64).reshape(-1, 6)
    materials = np.asarray(materials, dtype=np.float64).reshape(-1, 3)
    vv, uu = np.mgrid[0:height, 0:width]
    dirs = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu, dtype=np.float64)], -1)
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([cam_x, 0.0, 0.0])
    origins = np.broadcast_to(origin, dirs.shape)

    t, idx, nrm = intersect(types, params, origins, dirs)
    hit = idx >= 0
    radiance = np.zeros(dirs.shape[0])
    depth = np.zeros(dirs.shape[0])
    shadowed = np.zeros(dirs.shape[0], dtype=bool)
    if not hit.any():
        return radiance.reshape(height, width), depth.reshape(height, width), \
            shadowed.reshape(height, width)

    th, dh, nh = t[hit], dirs[hit], nrm[hit]
    pts = origin + th[:, None] * dh
    depth[hit] = th * dh[:, 2]
    mat = materials[idx[hit]]
    albedo, ks, shin = mat[:, 0], mat[:, 1], mat[:, 2]

    proj = np.array([proj_x, 0.0, 0.0])
    to_l = proj - pts
    dist = np.linalg.norm(to_l, axis=1)
    l = to_l / dist[:, None]
    st, _, _ = intersect(types, params, pts, l, t_max=dist - T_MIN)
    occl = np.isfinite(st)
    shadowed[hit] = occl

    zc = pts[:, 2]
    front = zc > 1e-12
    safe_z = np.where(front, zc, 1.0)
    xp = pfx * (pts[:, 0] - proj_x) / safe_z + pcx
    yp = pfy * pts[:, 1] / safe_z + pcy
    pat = np.where(front, _bilinear_zero(pattern, xp, yp), 0.0)

    ndotl = np.einsum("ij,ij->i", nh, l)
    diffuse = albedo * np.maximum(ndotl, 0.0)
    refl = 2.0 * ndotl[:, None] * nh - l
    v = -dh
    rdotv = np.maximum(np.einsum("ij,ij->i", refl, v), 0.0)
    spec = np.where(ndotl > 0, ks * rdotv ** shin, 0.0)
    direct = power * pat * (diffuse + spec) / (dist * dist)
    direct = np.where(occl, 0.0, direct)
    radiance[hit] = direct + ambient * albedo
    return radiance.reshape(height, width), depth.reshape(height, width), \
        shadowed.reshape(height, width)


def _box_sum(a, r):
    """Sum over a (2r+1)^2 window, NaN where the window leaves the image."""
    h, w = a.shape
    out = np.full((h, w), np.nan)
    if h < 2 * r + 1 or w < 2 * r + 1:
        return out
    c = np.zeros((h + 1, w + 1))
    c[1:, 1:] = a.cumsum(0).cumsum(1)
    k = 2 * r + 1
    s = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    out[r:h - r, r:w - r] = s
    return out


METRIC_ZNCC, METRIC_SAD = 0, 1


def window_scores(left, ref, window, max_disp, metric, min_var):
    """Matching score for every pixel and candidate disparity (higher is better).

    ``scores[i, j, d]`` compares the window around ``left[i, j]`` with the
    window around ``ref[i, j - d]``; NaN when either window leaves the image
    or (ZNCC) either window variance is below ``min_var``.
    """
    left = np.asarray(left, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    h, w = left.shape
    r = window // 2
    n = float(window * window)
    out = np.full((h, w, max_disp + 1), np.nan)
    if metric == METRIC_ZNCC:
        sl = _box_sum(left, r)
        sll = _box_sum(left * left, r)
        var_l = sll / n - (sl / n) ** 2
        sr = _box_sum(ref, r)
        srr = _box_sum(ref * ref, r)
        var_r = srr / n - (sr / n) ** 2
    for d in range(max_disp + 1):
        if d >= w:
            break
        shifted = np.zeros_like(ref)
        shifted[:, d:] = ref[:, :w - d]
        if metric == METRIC_ZNCC:
            slr = _box_sum(left * shifted, r)
            vr = np.full_like(var_r, np.nan)
            vr[:, d:] = var_r[:, :w - d]
            mr = np.full_like(sr, np.nan)
            mr[:, d:] = sr[:, :w - d]
            with np.errstate(invalid="ignore", divide="ignore"):
                cov = slr / n - (sl / n) * (mr / n)
                s = cov / np.sqrt(var_l * vr)
                s = np.where((var_l >= min_var) & (vr >= min_var), s, np.nan)
        else:
            s = -_box_sum(np.abs(left - shifted), r)
        s[:, :d + r] = np.nan
        out[:, :, d] = s
    return out


def temporal_scores(captures, refs, max_disp, step=1.0):
    """Per-pixel ZNCC between capture K-vectors and reference K-vectors at column ``j - d``.

    Candidates are ``d = c * step`` for ``c = 0 .. floor(max_disp / step)``;
    fractional columns are linearly interpolated, columns left of 0 read as
    zero. Returns ``(H, W, n_candidates)``.
    """
    cap = np.asarray(captures, dtype=np.float64)
    ref = np.asarray(refs, dtype=np.float64)
    k, h, w = cap.shape
    n_cand = int(np.floor(max_disp / step + 1e-9)) + 1

    def normalize(a):
        z = a - a.mean(axis=0, keepdims=True)
        nrm = np.sqrt((z * z).sum(axis=0, keepdims=True))
        with np.errstate(invalid="ignore", divide="ignore"):
            z = z / nrm
        return np.where(nrm > 1e-12, z, np.nan)

    cn = normalize(cap)
    out = np.full((h, w, n_cand), np.nan)
    cols = np.arange(w, dtype=np.float64)
    padded = np.concatenate([np.zeros((k, h, 1)), ref], axis=2)  # column -1 reads zero
    for c in range(n_cand):
        x = cols - c * step
        ok = x >= 0
        x0 = np.floor(x).astype(np.int64)
        fr = x - x0
        x1 = np.minimum(x0 + 1, w - 1)
        lo = padded[:, :, np.clip(x0, -1, w - 1) + 1]
        hi = padded[:, :, np.clip(x1, -1, w - 1) + 1]
        shifted = lo * (1.0 - fr) + hi * fr
        rn = normalize(shifted)
        sc = (cn * rn).sum(axis=0)
        out[:, :, c] = np.where(ok[None, :], sc, np.nan)
    return out
