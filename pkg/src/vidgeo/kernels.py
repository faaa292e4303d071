"""Ray-primitive intersection kernels.

Two interchangeable backends: a numba @njit per-pixel loop (default) and a
vectorized numpy mirror. Both are written branch-free over the same IEEE
operations in the same order, so their outputs agree bitwise; a regression
test pins that. Set VIDGEO_DISABLE_NUMBA=1 (or run without numba installed)
to force the numpy path. Primitives are tested in array order and the
nearest hit beyond EPS_RAY wins; hits beyond the far plane (camera-space
depth) are misses.

Primitive encoding (see scenes.to_arrays):
  kind 0 plane   data [height, ...]
  kind 1 sphere  data [cx, cy, cz, r, ...]
  kind 2 box     data [minx, miny, minz, maxx, maxy, maxz]
  albedo [mode, r1, g1, b1, r2, g2, b2, cell]   mode 0 solid, 1 checker
Shading: lambert against one directional light, rgb = albedo*(0.2+0.8*lit).
"""

import math
import os

import numpy as np

EPS_RAY = 1e-6
TINY = 1e-30

_FORCED_OFF = os.environ.get("VIDGEO_DISABLE_NUMBA", "") == "1"

try:
    if _FORCED_OFF:
        raise ImportError("numba disabled by VIDGEO_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(fn):
            return fn
        return deco if not (len(a) == 1 and callable(a[0])) else a[0]


def active_backend():
    return "numba" if HAVE_NUMBA else "numpy"


@njit(cache=True)
def _render_loop(o, dirs, dcamz, kinds, data, alb, bg, light, far,
                 rgb, depth, mask, inc):
    """Nearest-hit trace + shade for every pixel. Scalar twin of
    _render_numpy; keep the arithmetic in lockstep with it."""
    H, W = dirs.shape[0], dirs.shape[1]
    P = kinds.shape[0]
    for i in range(H):
        for j in range(W):
            d0 = dirs[i, j, 0]
            d1 = dirs[i, j, 1]
            d2 = dirs[i, j, 2]
            best_s = np.inf
            best_p = -1
            best_axis = 0
            for p in range(P):
                kind = kinds[p]
                if kind == 0:          # plane y = h
                    dy = d1
                    denom = math.copysign(TINY, dy) if abs(dy) < TINY else dy
                    s = (data[p, 0] - o[1]) / denom
                    hit = s > EPS_RAY
                    axis = 0
                elif kind == 1:        # sphere
                    ocx = o[0] - data[p, 0]
                    ocy = o[1] - data[p, 1]
                    ocz = o[2] - data[p, 2]
                    r = data[p, 3]
                    b = d0 * ocx + d1 * ocy + d2 * ocz
                    c2 = (ocx * ocx + ocy * ocy + ocz * ocz) - r * r
                    disc = b * b - c2
                    sq = math.sqrt(max(disc, 0.0))
                    s1 = -b - sq
                    s2 = -b + sq
                    s = s1 if s1 > EPS_RAY else s2
                    hit = (disc > 0.0) and (s > EPS_RAY)
                    axis = 0
                else:                  # axis-aligned box
                    sx = math.copysign(TINY, d0) if abs(d0) < TINY else d0
                    sy = math.copysign(TINY, d1) if abs(d1) < TINY else d1
                    sz = math.copysign(TINY, d2) if abs(d2) < TINY else d2
                    t1 = (data[p, 0] - o[0]) / sx
                    t2 = (data[p, 3] - o[0]) / sx
                    lox = min(t1, t2)
                    hix = max(t1, t2)
                    t1 = (data[p, 1] - o[1]) / sy
                    t2 = (data[p, 4] - o[1]) / sy
                    loy = min(t1, t2)
                    hiy = max(t1, t2)
                    t1 = (data[p, 2] - o[2]) / sz
                    t2 = (data[p, 5] - o[2]) / sz
                    loz = min(t1, t2)
                    hiz = max(t1, t2)
                    tnear = lox
                    axis = 0
                    if loy > tnear:
                        tnear = loy
                        axis = 1
                    if loz > tnear:
                        tnear = loz
                        axis = 2
                    tfar = min(hix, min(hiy, hiz))
                    s = tnear if tnear > EPS_RAY else tfar
                    hit = (tnear <= tfar) and (s > EPS_RAY)
                if hit and s < best_s:
                    best_s = s
                    best_p = p
                    best_axis = axis

            dep = best_s * dcamz[i, j]
            if best_p < 0 or dep > far:
                rgb[i, j, 0] = bg[0]
                rgb[i, j, 1] = bg[1]
                rgb[i, j, 2] = bg[2]
                depth[i, j] = 0.0
                mask[i, j] = 0
                inc[i, j] = 0.0
                continue

            p = best_p
            s = best_s
            x0 = o[0] + s * d0
            x1 = o[1] + s * d1
            x2 = o[2] + s * d2
            kind = kinds[p]
            if kind == 0:
                n0, n1, n2 = 0.0, -1.0, 0.0
            elif kind == 1:
                r = data[p, 3]
                n0 = (x0 - data[p, 0]) / r
                n1 = (x1 - data[p, 1]) / r
                n2 = (x2 - data[p, 2]) / r
            else:
                n0, n1, n2 = 0.0, 0.0, 0.0
                if best_axis == 0:
                    n0 = -math.copysign(1.0, d0)
                elif best_axis == 1:
                    n1 = -math.copysign(1.0, d1)
                else:
                    n2 = -math.copysign(1.0, d2)

            if alb[p, 0] == 1.0:       # checker
                cell = alb[p, 7]
                par = math.floor(x0 / cell) + math.floor(x1 / cell) \
                    + math.floor(x2 / cell)
                odd = (par - 2.0 * math.floor(par / 2.0)) != 0.0
            else:
                odd = False
            if odd:
                c0, c1, c2 = alb[p, 4], alb[p, 5], alb[p, 6]
            else:
                c0, c1, c2 = alb[p, 1], alb[p, 2], alb[p, 3]

            ndl = n0 * light[0] + n1 * light[1] + n2 * light[2]
            lit = max(0.0, -ndl)
            shade = 0.2 + 0.8 * lit
            rgb[i, j, 0] = c0 * shade
            rgb[i, j, 1] = c1 * shade
            rgb[i, j, 2] = c2 * shade
            depth[i, j] = dep
            mask[i, j] = 1
            inc[i, j] = n0 * d0 + n1 * d1 + n2 * d2


def _render_numpy(o, dirs, dcamz, kinds, data, alb, bg, light, far,
                  rgb, depth, mask, inc):
    """Vectorized twin of _render_loop; identical operations and order."""
    H, W = dirs.shape[0], dirs.shape[1]
    d0, d1, d2 = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    best_s = np.full((H, W), np.inf)
    best_p = np.full((H, W), -1, dtype=np.int64)
    best_axis = np.zeros((H, W), dtype=np.int64)

    def safe(d):
        return np.where(np.abs(d) < TINY, np.copysign(TINY, d), d)

    for p in range(kinds.shape[0]):
        kind = kinds[p]
        axis = np.zeros((H, W), dtype=np.int64)
        if kind == 0:
            s = (data[p, 0] - o[1]) / safe(d1)
            hit = s > EPS_RAY
        elif kind == 1:
            ocx = o[0] - data[p, 0]
            ocy = o[1] - data[p, 1]
            ocz = o[2] - data[p, 2]
            r = data[p, 3]
            b = d0 * ocx + d1 * ocy + d2 * ocz
            c2 = (ocx * ocx + ocy * ocy + ocz * ocz) - r * r
            disc = b * b - c2
            sq = np.sqrt(np.maximum(disc, 0.0))
            s1 = -b - sq
            s2 = -b + sq
            s = np.where(s1 > EPS_RAY, s1, s2)
            hit = (disc > 0.0) & (s > EPS_RAY)
        else:
            sx, sy, sz = safe(d0), safe(d1), safe(d2)
            t1 = (data[p, 0] - o[0]) / sx
            t2 = (data[p, 3] - o[0]) / sx
            lox = np.minimum(t1, t2)
            hix = np.maximum(t1, t2)
            t1 = (data[p, 1] - o[1]) / sy
            t2 = (data[p, 4] - o[1]) / sy
            loy = np.minimum(t1, t2)
            hiy = np.maximum(t1, t2)
            t1 = (data[p, 2] - o[2]) / sz
            t2 = (data[p, 5] - o[2]) / sz
            loz = np.minimum(t1, t2)
            hiz = np.maximum(t1, t2)
            tnear = lox.copy()
            upd = loy > tnear
            tnear = np.where(upd, loy, tnear)
            axis = np.where(upd, 1, axis)
            upd = loz > tnear
            tnear = np.where(upd, loz, tnear)
            axis = np.where(upd, 2, axis)
            tfar = np.minimum(hix, np.minimum(hiy, hiz))
            s = np.where(tnear > EPS_RAY, tnear, tfar)
            hit = (tnear <= tfar) & (s > EPS_RAY)
        upd = hit & (s < best_s)
        best_s = np.where(upd, s, best_s)
        best_p = np.where(upd, p, best_p)
        best_axis = np.where(upd, axis, best_axis)

    dep = best_s * dcamz
    miss = (best_p < 0) | (dep > far)
    rgb[...] = bg[None, None, :]
    depth[...] = 0.0
    mask[...] = 0
    inc[...] = 0.0

    for p in range(kinds.shape[0]):
        sel = (best_p == p) & ~miss
        if not sel.any():
            continue
        s = best_s[sel]
        sd0, sd1, sd2 = d0[sel], d1[sel], d2[sel]
        x0 = o[0] + s * sd0
        x1 = o[1] + s * sd1
        x2 = o[2] + s * sd2
        kind = kinds[p]
        if kind == 0:
            n0 = np.zeros_like(s)
            n1 = np.full_like(s, -1.0)
            n2 = np.zeros_like(s)
        elif kind == 1:
            r = data[p, 3]
            n0 = (x0 - data[p, 0]) / r
            n1 = (x1 - data[p, 1]) / r
            n2 = (x2 - data[p, 2]) / r
        else:
            ax = best_axis[sel]
            n0 = np.where(ax == 0, -np.copysign(1.0, sd0), 0.0)
            n1 = np.where(ax == 1, -np.copysign(1.0, sd1), 0.0)
            n2 = np.where(ax == 2, -np.copysign(1.0, sd2), 0.0)

        if alb[p, 0] == 1.0:
            cell = alb[p, 7]
            par = np.floor(x0 / cell) + np.floor(x1 / cell) \
                + np.floor(x2 / cell)
            odd = (par - 2.0 * np.floor(par / 2.0)) != 0.0
        else:
            odd = np.zeros_like(s, dtype=bool)
        c0 = np.where(odd, alb[p, 4], alb[p, 1])
        c1 = np.where(odd, alb[p, 5], alb[p, 2])
        c2_ = np.where(odd, alb[p, 6], alb[p, 3])

        ndl = n0 * light[0] + n1 * light[1] + n2 * light[2]
        lit = np.maximum(0.0, -ndl)
        shade = 0.2 + 0.8 * lit
        rgb[..., 0][sel] = c0 * shade
        rgb[..., 1][sel] = c1 * shade
        rgb[..., 2][sel] = c2_ * shade
        depth[sel] = dep[sel]
        mask[sel] = 1
        inc[sel] = n0 * sd0 + n1 * sd1 + n2 * sd2


def render_rays(origin, dirs, dcamz, kinds, data, alb, bg, light, far,
                backend=None):
    """Trace + shade arbitrary rays.

    dirs (..., 3) unit world directions from a single origin; dcamz (...)
    their camera-frame z components (camera depth of a hit at parameter s is
    s*dcamz). Returns (rgb (...,3), depth (...), mask (...) uint8); misses
    carry the background color and depth 0. backend overrides the
    module-selected one ('numba'/'numpy') — used by the benchmark and the
    backend-equivalence test.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    lead = dirs.shape[:-1]
    dirs2 = dirs.reshape(1, -1, 3) if dirs.ndim != 3 else dirs
    dcamz2 = np.ascontiguousarray(dcamz, dtype=np.float64).reshape(dirs2.shape[:2])
    H, W = dirs2.shape[:2]
    rgb = np.empty((H, W, 3))
    depth = np.empty((H, W))
    mask = np.empty((H, W), dtype=np.uint8)
    inc = np.empty((H, W))
    args = (np.ascontiguousarray(origin, dtype=np.float64), dirs2, dcamz2,
            np.ascontiguousarray(kinds, dtype=np.int64),
            np.ascontiguousarray(data, dtype=np.float64),
            np.ascontiguousarray(alb, dtype=np.float64),
            np.ascontiguousarray(bg, dtype=np.float64),
            np.ascontiguousarray(light, dtype=np.float64),
            float(far), rgb, depth, mask, inc)
    use = backend or active_backend()
    if use == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but unavailable")
        _render_loop(*args)
    else:
        _render_numpy(*args)
    return (rgb.reshape(lead + (3,)), depth.reshape(lead),
            mask.reshape(lead), inc.reshape(lead))
