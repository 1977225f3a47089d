"""Compiled inner loops: triangle rasterization and sight-line occlusion.

All kernels work in fractional cell coordinates (col, row) of a scene grid
whose cell (r, c) is centred on integer coordinates (c, r).
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def fill_triangles(tris, height, width, out):
    """Mark cells whose centre lies inside (or on the edge of) a 2D triangle.

    tris: (M, 3, 2) float64 vertices as (col, row).
    """
    eps = 1e-7
    for m in range(tris.shape[0]):
        x0 = tris[m, 0, 0]
        y0 = tris[m, 0, 1]
        x1 = tris[m, 1, 0]
        y1 = tris[m, 1, 1]
        x2 = tris[m, 2, 0]
        y2 = tris[m, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < 1e-12:
            continue
        sign = 1.0 if area > 0 else -1.0
        c_lo = max(0, int(math.ceil(min(x0, x1, x2) - eps)))
        c_hi = min(width - 1, int(math.floor(max(x0, x1, x2) + eps)))
        r_lo = max(0, int(math.ceil(min(y0, y1, y2) - eps)))
        r_hi = min(height - 1, int(math.floor(max(y0, y1, y2) + eps)))
        for r in range(r_lo, r_hi + 1):
            py = float(r)
            for c in range(c_lo, c_hi + 1):
                px = float(c)
                w0 = sign * ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px))
                w1 = sign * ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px))
                w2 = sign * ((x0 - px) * (y1 - py) - (y0 - py) * (x1 - px))
                if w0 >= -eps and w1 >= -eps and w2 >= -eps:
                    out[r, c] = True


@numba.njit(cache=True, nogil=True)
def _splat(out, col, row, h):
    c = int(math.floor(col + 0.5))
    r = int(math.floor(row + 0.5))
    if 0 <= r < out.shape[0] and 0 <= c < out.shape[1]:
        if h > out[r, c]:
            out[r, c] = h


@numba.njit(cache=True, nogil=True)
def _splat_segment(out, a, b, step, ceiling):
    """Sample the segment a-b (cols, rows, heights in metres) and splat."""
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    dz_cells = (b[2] - a[2]) / step[1]
    n = max(1, int(math.ceil(math.sqrt(dx * dx + dy * dy + dz_cells * dz_cells) / step[0])))
    for i in range(n + 1):
        t = i / n
        h = a[2] + t * (b[2] - a[2])
        if h > 0.0 and h <= ceiling:
            _splat(out, a[0] + t * dx, a[1] + t * dy, h)


@numba.njit(cache=True, nogil=True)
def splat_surface(tris, ceiling, spacing, resolution, out):
    """Max-height splat of surface samples of 3D triangles.

    tris: (M, 3, 3) float64 vertices as (col, row, height above floor in m).
    Samples lie on a lattice with spacing ``spacing`` cells along two edges,
    plus all three edges; samples with height outside (0, ceiling] are
    dropped, and triangles crossing the ceiling contribute their cut
    segment at exactly ``ceiling``.
    """
    step = np.empty(2)
    step[0] = spacing
    step[1] = resolution
    for m in range(tris.shape[0]):
        v0 = tris[m, 0]
        v1 = tris[m, 1]
        v2 = tris[m, 2]
        zmin = min(v0[2], v1[2], v2[2])
        zmax = max(v0[2], v1[2], v2[2])
        if zmax <= 0.0 or zmin > ceiling:
            continue
        e1 = v1 - v0
        e2 = v2 - v0
        l1 = math.sqrt(e1[0] ** 2 + e1[1] ** 2 + (e1[2] / resolution) ** 2)
        l2 = math.sqrt(e2[0] ** 2 + e2[1] ** 2 + (e2[2] / resolution) ** 2)
        n1 = max(1, int(math.ceil(l1 / spacing)))
        n2 = max(1, int(math.ceil(l2 / spacing)))
        for i in range(n1 + 1):
            a = i / n1
            for j in range(n2 + 1):
                b = j / n2
                if a + b > 1.0 + 1e-12:
                    break
                h = v0[2] + a * e1[2] + b * e2[2]
                if h > 0.0 and h <= ceiling:
                    _splat(out, v0[0] + a * e1[0] + b * e2[0], v0[1] + a * e1[1] + b * e2[1], h)
        _splat_segment(out, v0, v1, step, ceiling)
        _splat_segment(out, v1, v2, step, ceiling)
        _splat_segment(out, v2, v0, step, ceiling)
        if zmax > ceiling and zmin <= ceiling:
            pts = np.empty((2, 3))
            k = 0
            for e in range(3):
                pa = tris[m, e]
                pb = tris[m, (e + 1) % 3]
                if (pa[2] <= ceiling) != (pb[2] <= ceiling) and k < 2:
                    t = (ceiling - pa[2]) / (pb[2] - pa[2])
                    pts[k, 0] = pa[0] + t * (pb[0] - pa[0])
                    pts[k, 1] = pa[1] + t * (pb[1] - pa[1])
                    pts[k, 2] = ceiling
                    k += 1
            if k == 2:
                _splat_segment(out, pts[0], pts[1], step, ceiling)


SPAN = 16


@numba.njit(cache=True, nogil=True, inline="always")
def _cell(origin, t, delta):
    return int(math.floor(origin + t * delta + 0.5))


@numba.njit(cache=True, nogil=True)
def line_of_sight(heights, occupancy, eye_col, eye_row, eye_h, tcol, trow, theight, self_exclude, n_samples, out):
    """Height-field sight-line test from a raised eye to each target.

    The sight line descends linearly from ``eye_h`` at t=0 to the target
    height at t=1.  Samples t = s / n_samples for s < n_samples are tested;
    the target is occluded if any sample's obstacle height reaches the line.
    Targets flagged in ``self_exclude`` ignore samples in their own cell.

    ``occupancy`` is the summed-area table of ``heights > 0``.  Rounded
    sample cells are monotone in s, so a run of SPAN samples whose bounding
    box holds no obstacle is skipped without changing the result.
    """
    H = heights.shape[0]
    W = heights.shape[1]
    for i in range(tcol.shape[0]):
        dc = tcol[i] - eye_col
        dr = trow[i] - eye_row
        drop = eye_h - theight[i]
        tc = int(math.floor(tcol[i] + 0.5))
        tr = int(math.floor(trow[i] + 0.5))
        visible = True
        for s0 in range(0, n_samples, SPAN):
            s1 = min(s0 + SPAN, n_samples) - 1
            ca = _cell(eye_col, s0 / n_samples, dc)
            cb = _cell(eye_col, s1 / n_samples, dc)
            ra = _cell(eye_row, s0 / n_samples, dr)
            rb = _cell(eye_row, s1 / n_samples, dr)
            c0 = max(min(ca, cb), 0)
            c1 = min(max(ca, cb), W - 1)
            r0 = max(min(ra, rb), 0)
            r1 = min(max(ra, rb), H - 1)
            if c0 > c1 or r0 > r1:
                continue
            if occupancy[r1 + 1, c1 + 1] - occupancy[r0, c1 + 1] - occupancy[r1 + 1, c0] + occupancy[r0, c0] == 0:
                continue
            for s in range(s0, s1 + 1):
                t = s / n_samples
                c = _cell(eye_col, t, dc)
                r = _cell(eye_row, t, dr)
                if r < 0 or r >= H or c < 0 or c >= W:
                    continue
                if self_exclude[i] and r == tr and c == tc:
                    continue
                if heights[r, c] >= eye_h - t * drop:
                    visible = False
                    break
            if not visible:
                break
        out[i] = visible


def occupancy_table(heights):
    """Summed-area table of positive heights, padded with a zero row and column."""
    table = np.zeros((heights.shape[0] + 1, heights.shape[1] + 1), dtype=np.int32)
    np.cumsum(np.cumsum(heights > 0, axis=0, dtype=np.int32), axis=1, out=table[1:, 1:])
    return table


@numba.njit(cache=True, nogil=True)
def nearest_column_pass(nearest_row, dy2, labels, out):
    """Second pass of the separable nearest-observed search.

    For each cell, scan columns outward and keep the candidate minimising
    (d^2, row, col); the scan stops once the column offset alone exceeds
    the best distance found.
    """
    h, w = dy2.shape
    for r in range(h):
        for c in range(w):
            best_d = np.int64(-1)
            best_r = 0
            best_c = 0
            for side in range(2):
                step = -1 if side == 0 else 1
                cc = c if side == 0 else c + 1
                while 0 <= cc < w:
                    dx = cc - c
                    dx2 = np.int64(dx * dx)
                    if best_d >= 0 and dx2 > best_d:
                        break
                    d = dy2[r, cc] + dx2
                    nr = nearest_row[r, cc]
                    if dy2[r, cc] >= 0:
                        if (best_d < 0 or d < best_d or (d == best_d and (nr < best_r or (nr == best_r and cc < best_c)))):
                            best_d = d
                            best_r = nr
                            best_c = cc
                    cc += step
            out[r, c] = labels[best_r, best_c]
