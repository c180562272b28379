# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: ray-cast rendering and ZNCC/SAD score volumes.

Mirrors ``_kernels_py`` exactly; see that module for the contracts.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, floor, pow, INFINITY, NAN, isfinite

cnp.import_array()

cdef int PLANE = 0
cdef int SPHERE = 1
cdef int BOX = 2
cdef double T_MIN = 1e-6


cdef inline double _dot(double* a, double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef double _nearest(const long[:] types, const double[:, :] params, double* o, double* d,
                     double t_max, long* out_idx, double* out_n) nogil:
    cdef Py_ssize_t i, n = types.shape[0]
    cdef int ax, kind, near_ax, far_ax, use_near
    cdef double best = INFINITY, t, t0, t1, denom, b, cc, disc, sq, tn, tf, ta, tb, lo, hi, tmp
    cdef double nrm[3]
    cdef double oc[3]
    out_idx[0] = -1
    for i in range(n):
        kind = <int>types[i]
        t = INFINITY
        if kind == PLANE:
            denom = d[0] * params[i, 3] + d[1] * params[i, 4] + d[2] * params[i, 5]
            if fabs(denom) > 1e-12:
                t = ((params[i, 0] - o[0]) * params[i, 3] + (params[i, 1] - o[1]) * params[i, 4]
                     + (params[i, 2] - o[2]) * params[i, 5]) / denom
                tmp = -1.0 if denom > 0 else 1.0
                nrm[0] = params[i, 3] * tmp
                nrm[1] = params[i, 4] * tmp
                nrm[2] = params[i, 5] * tmp
        elif kind == SPHERE:
            oc[0] = o[0] - params[i, 0]
            oc[1] = o[1] - params[i, 1]
            oc[2] = o[2] - params[i, 2]
            b = _dot(oc, d)
            cc = _dot(oc, oc) - params[i, 3] * params[i, 3]
            disc = b * b - cc
            if disc >= 0:
                sq = sqrt(disc)
                t0 = -b - sq
                t1 = -b + sq
                t = t0 if t0 > T_MIN else t1
                for ax in range(3):
                    nrm[ax] = (o[ax] + t * d[ax] - params[i, ax]) / params[i, 3]
        elif kind == BOX:
            tn = -INFINITY
            tf = INFINITY
            near_ax = 0
            far_ax = 0
            for ax in range(3):
                lo = params[i, ax]
                hi = params[i, ax + 3]
                if fabs(d[ax]) < 1e-12:
                    if o[ax] < lo or o[ax] > hi:
                        tn = INFINITY
                        tf = -INFINITY
                    continue
                ta = (lo - o[ax]) / d[ax]
                tb = (hi - o[ax]) / d[ax]
                if ta > tb:
                    tmp = ta
                    ta = tb
                    tb = tmp
                if ta > tn:
                    tn = ta
                    near_ax = ax
                if tb < tf:
                    tf = tb
                    far_ax = ax
            if tn <= tf:
                use_near = tn > T_MIN
                t = tn if use_near else tf
                nrm[0] = 0.0
                nrm[1] = 0.0
                nrm[2] = 0.0
                if use_near:
                    nrm[near_ax] = -1.0 if d[near_ax] > 0 else (1.0 if d[near_ax] < 0 else 0.0)
                else:
                    nrm[far_ax] = 1.0 if d[far_ax] > 0 else (-1.0 if d[far_ax] < 0 else 0.0)
        if t > T_MIN and t < best and t < t_max:
            best = t
            out_idx[0] = i
            out_n[0] = nrm[0]
            out_n[1] = nrm[1]
            out_n[2] = nrm[2]
    return best


cdef inline double _bilinear_zero(const double[:, :] img, double x, double y) nogil:
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef double fx, fy, out = 0.0, wx, wy
    cdef long x0 = <long>floor(x), y0 = <long>floor(y), xx, yy
    cdef int dx, dy
    fx = x - x0
    fy = y - y0
    for dy in range(2):
        wy = fy if dy else 1.0 - fy
        yy = y0 + dy
        if yy < 0 or yy >= h:
            continue
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            xx = x0 + dx
            if xx < 0 or xx >= w:
                continue
            out += wx * wy * img[yy, xx]
    return out


def intersect(types, params, origins, dirs, t_max=None):
    cdef const long[:] ty = np.ascontiguousarray(types, dtype=np.int64)
    cdef const double[:, :] pr = np.ascontiguousarray(params, dtype=np.float64).reshape(-1, 6)
    cdef const double[:, :] og = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, :] dr = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef Py_ssize_t n = og.shape[0], r
    lim_arr = np.full(n, np.inf) if t_max is None else np.ascontiguousarray(
        np.broadcast_to(t_max, (n,)), dtype=np.float64)
    cdef const double[:] lim = lim_arr
    t_out = np.full(n, np.inf)
    i_out = np.full(n, -1, dtype=np.int64)
    n_out = np.zeros((n, 3))
    cdef double[:] tv = t_out
    cdef long[:] iv = i_out
    cdef double[:, :] nv = n_out
    cdef double o[3]
    cdef double d[3]
    cdef double nn[3]
    cdef long idx
    for r in range(n):
        o[0] = og[r, 0]; o[1] = og[r, 1]; o[2] = og[r, 2]
        d[0] = dr[r, 0]; d[1] = dr[r, 1]; d[2] = dr[r, 2]
        tv[r] = _nearest(ty, pr, o, d, lim[r], &idx, nn)
        iv[r] = idx
        if idx >= 0:
            nv[r, 0] = nn[0]; nv[r, 1] = nn[1]; nv[r, 2] = nn[2]
    return t_out, i_out, n_out


def render_view(types, params, materials, double cam_x, double fx, double fy, double cx,
                double cy, int width, int height, double proj_x, double pfx, double pfy,
                double pcx, double pcy, pattern, double power, double ambient):
    cdef const long[:] ty = np.ascontiguousarray(types, dtype=np.int64)
    cdef const double[:, :] pr = np.ascontiguousarray(params, dtype=np.float64).reshape(-1, 6)
    cdef const double[:, :] mt = np.ascontiguousarray(materials, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, :] pat = np.ascontiguousarray(pattern, dtype=np.float64)
    rad_arr = np.zeros((height, width))
    dep_arr = np.zeros((height, width))
    sh_arr = np.zeros((height, width), dtype=np.uint8)
    cdef double[:, :] rad = rad_arr
    cdef double[:, :] dep = dep_arr
    cdef unsigned char[:, :] shd = sh_arr
    cdef int u, v, ax
    cdef long idx, sidx
    cdef double o[3]
    cdef double d[3]
    cdef double nrm[3]
    cdef double p[3]
    cdef double l[3]
    cdef double sn[3]
    cdef double refl[3]
    cdef double t, norm, dist, st, xp, yp, patv, ndotl, rdotv, diffuse, spec, direct, albedo
    with nogil:
        for v in range(height):
            for u in range(width):
                o[0] = cam_x; o[1] = 0.0; o[2] = 0.0
                d[0] = (u - cx) / fx
                d[1] = (v - cy) / fy
                d[2] = 1.0
                norm = sqrt(_dot(d, d))
                d[0] /= norm; d[1] /= norm; d[2] /= norm
                t = _nearest(ty, pr, o, d, INFINITY, &idx, nrm)
                if idx < 0:
                    continue
                for ax in range(3):
                    p[ax] = o[ax] + t * d[ax]
                dep[v, u] = t * d[2]
                albedo = mt[idx, 0]
                l[0] = proj_x - p[0]
                l[1] = -p[1]
                l[2] = -p[2]
                dist = sqrt(_dot(l, l))
                l[0] /= dist; l[1] /= dist; l[2] /= dist
                st = _nearest(ty, pr, p, l, dist - T_MIN, &sidx, sn)
                direct = 0.0
                if sidx >= 0:
                    shd[v, u] = 1
                else:
                    patv = 0.0
                    if p[2] > 1e-12:
                        xp = pfx * (p[0] - proj_x) / p[2] + pcx
                        yp = pfy * p[1] / p[2] + pcy
                        patv = _bilinear_zero(pat, xp, yp)
                    ndotl = _dot(nrm, l)
                    diffuse = albedo * (ndotl if ndotl > 0 else 0.0)
                    spec = 0.0
                    if ndotl > 0:
                        for ax in range(3):
                            refl[ax] = 2.0 * ndotl * nrm[ax] - l[ax]
                        rdotv = -_dot(refl, d)
                        if rdotv > 0:
                            spec = mt[idx, 1] * pow(rdotv, mt[idx, 2])
                    direct = power * patv * (diffuse + spec) / (dist * dist)
                rad[v, u] = direct + ambient * albedo
    return rad_arr, dep_arr, sh_arr.astype(bool)


cdef void _integral(double[:, :] src, double[:, :] dst) noexcept nogil:
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], i, j
    cdef double row
    for j in range(w + 1):
        dst[0, j] = 0.0
    for i in range(h):
        dst[i + 1, 0] = 0.0
        row = 0.0
        for j in range(w):
            row += src[i, j]
            dst[i + 1, j + 1] = dst[i, j + 1] + row


cdef inline double _box(double[:, :] c, Py_ssize_t i, Py_ssize_t j, int r) noexcept nogil:
    # sum over rows i-r..i+r and columns j-r..j+r
    return (c[i + r + 1, j + r + 1] - c[i - r, j + r + 1]
            - c[i + r + 1, j - r] + c[i - r, j - r])


def window_scores(left, ref, int window, int max_disp, int metric, double min_var):
    cdef const double[:, :] L = np.ascontiguousarray(left, dtype=np.float64)
    cdef const double[:, :] R = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t h = L.shape[0], w = L.shape[1]
    out_arr = np.full((h, w, max_disp + 1), np.nan)
    cdef double[:, :, :] out = out_arr
    cdef int r = window // 2
    cdef double n = window * window
    cdef Py_ssize_t i, j, k
    cdef int dd
    cdef double ml, mr, vl, vr
    if h < window or w < window:
        return out_arr
    work_arr = np.zeros((h, w))
    cdef double[:, :] work = work_arr
    cl_arr = np.zeros((h + 1, w + 1)); cll_arr = np.zeros((h + 1, w + 1))
    cr_arr = np.zeros((h + 1, w + 1)); crr_arr = np.zeros((h + 1, w + 1))
    cx_arr = np.zeros((h + 1, w + 1))
    cdef double[:, :] CL = cl_arr
    cdef double[:, :] CLL = cll_arr
    cdef double[:, :] CR = cr_arr
    cdef double[:, :] CRR = crr_arr
    cdef double[:, :] CX = cx_arr
    with nogil:
        if metric == 0:
            for i in range(h):
                for j in range(w):
                    work[i, j] = L[i, j]
            _integral(work, CL)
            for i in range(h):
                for j in range(w):
                    work[i, j] = L[i, j] * L[i, j]
            _integral(work, CLL)
            for i in range(h):
                for j in range(w):
                    work[i, j] = R[i, j]
            _integral(work, CR)
            for i in range(h):
                for j in range(w):
                    work[i, j] = R[i, j] * R[i, j]
            _integral(work, CRR)
        for dd in range(max_disp + 1):
            if dd >= w:
                break
            for i in range(h):
                for j in range(w):
                    k = j - dd
                    if k < 0:
                        work[i, j] = 0.0
                    elif metric == 0:
                        work[i, j] = L[i, j] * R[i, k]
                    else:
                        work[i, j] = fabs(L[i, j] - R[i, k])
            _integral(work, CX)
            for i in range(r, h - r):
                for j in range(dd + r, w - r):
                    k = j - dd
                    if metric == 0:
                        ml = _box(CL, i, j, r) / n
                        mr = _box(CR, i, k, r) / n
                        vl = _box(CLL, i, j, r) / n - ml * ml
                        vr = _box(CRR, i, k, r) / n - mr * mr
                        if vl < min_var or vr < min_var:
                            continue
                        out[i, j, dd] = (_box(CX, i, j, r) / n - ml * mr) / sqrt(vl * vr)
                    else:
                        out[i, j, dd] = -_box(CX, i, j, r)
    return out_arr


def temporal_scores(captures, refs, int max_disp, double step=1.0):
    cdef const double[:, :, :] C = np.ascontiguousarray(captures, dtype=np.float64)
    cdef const double[:, :, :] R = np.ascontiguousarray(refs, dtype=np.float64)
    cdef Py_ssize_t K = C.shape[0], h = C.shape[1], w = C.shape[2]
    cdef Py_ssize_t n_cand = <Py_ssize_t>floor(max_disp / step + 1e-9) + 1
    out_arr = np.full((h, w, n_cand), np.nan)
    cdef double[:, :, :] out = out_arr
    cn_arr = np.empty((h, w, K))
    cdef double[:, :, :] CN = cn_arr
    ok_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, :] okc = ok_arr
    buf_arr = np.empty(K)
    cdef double[:] buf = buf_arr
    cdef Py_ssize_t i, j, q, c, x0, x1
    cdef double mc, nc, x, fr, a, b, mr, nr, acc
    with nogil:
        for i in range(h):
            for j in range(w):
                mc = 0
                for q in range(K):
                    mc += C[q, i, j]
                mc /= K
                nc = 0
                for q in range(K):
                    CN[i, j, q] = C[q, i, j] - mc
                    nc += CN[i, j, q] * CN[i, j, q]
                nc = sqrt(nc)
                if nc > 1e-12:
                    okc[i, j] = 1
                    for q in range(K):
                        CN[i, j, q] /= nc
        for i in range(h):
            for j in range(w):
                if not okc[i, j]:
                    continue
                for c in range(n_cand):
                    x = j - c * step
                    if x < 0:
                        break
                    x0 = <Py_ssize_t>floor(x)
                    fr = x - x0
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    mr = 0
                    for q in range(K):
                        a = R[q, i, x0]
                        b = R[q, i, x1]
                        buf[q] = a * (1.0 - fr) + b * fr
                        mr += buf[q]
                    mr /= K
                    nr = 0
                    acc = 0
                    for q in range(K):
                        buf[q] -= mr
                        nr += buf[q] * buf[q]
                        acc += CN[i, j, q] * buf[q]
                    nr = sqrt(nr)
                    if nr > 1e-12:
                        out[i, j, c] = acc / nr
    return out_arr
