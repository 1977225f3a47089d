"""Independent brute-force references used by the test-suite.

Nothing here imports the package's geometry or metric code: each oracle
recomputes its quantity from first principles, trading speed for clarity.
"""

from __future__ import annotations

import math
from itertools import combinations

import numba
import numpy as np

CANVAS = 512
CANVAS_RES = 10.0 / 512
CAM_COL, CAM_ROW = 256, 384


# --------------------------------------------------------------------------- visibility

@numba.njit(cache=True)
def _march(heights, eye_c, eye_r, eye_h, tc, tr, step, out):
    H, W = heights.shape
    for i in range(tc.shape[0]):
        dc = tc[i] - eye_c
        dr = tr[i] - eye_r
        length = math.sqrt(dc * dc + dr * dr)
        visible = True
        j = 0
        while True:
            t = j * step / length if length > 0 else 1.0
            if t >= 1.0:
                break
            c = int(math.floor(eye_c + t * dc + 0.5))
            r = int(math.floor(eye_r + t * dr + 0.5))
            if 0 <= r < H and 0 <= c < W and heights[r, c] >= eye_h * (1.0 - t):
                visible = False
                break
            j += 1
        out[i] = visible


def canvas_floor_targets(scene, x, y, yaw):
    """Frustum floor cells of the canvas and their fractional scene coordinates."""
    rows, cols = np.mgrid[0:CANVAS, 0:CANVAS]
    fwd = (CAM_ROW - rows) * CANVAS_RES
    side = (cols - CAM_COL) * CANVAS_RES
    frustum = (fwd > 0) & (np.abs(side) <= fwd + 1e-12)
    wx = x + fwd * math.cos(yaw) + side * math.sin(yaw)
    wy = y + fwd * math.sin(yaw) - side * math.cos(yaw)
    res = scene.floor_mask.resolution
    fc = (wx - scene.origin[0]) / res
    fr = (scene.origin[1] - wy) / res
    ic = np.floor(fc + 0.5).astype(int)
    ir = np.floor(fr + 0.5).astype(int)
    h, w = scene.floor_mask.shape
    inside = (ic >= 0) & (ic < w) & (ir >= 0) & (ir < h)
    floor = np.zeros(rows.shape, bool)
    floor[inside] = scene.floor_mask.cells[ir[inside], ic[inside]]
    return frustum & floor, fc, fr


def fine_visible_floor(scene, x, y, yaw, eye_h=1.25, step_m=0.001):
    """Ray-march every frustum floor target in metric steps of ``step_m``."""
    targets, fc, fr = canvas_floor_targets(scene, x, y, yaw)
    res = scene.floor_mask.resolution
    eye_c = (x - scene.origin[0]) / res
    eye_r = (scene.origin[1] - y) / res
    idx = np.flatnonzero(targets)
    out = np.zeros(len(idx), dtype=np.bool_)
    _march(np.asarray(scene.obstacle_height, dtype=np.float64), eye_c, eye_r, eye_h,
           fc.ravel()[idx], fr.ravel()[idx], step_m / res, out)
    vis = np.zeros(CANVAS * CANVAS, bool)
    vis[idx] = out
    return vis.reshape(CANVAS, CANVAS), targets


# --------------------------------------------------------------------------- nearest neighbour

def brute_nearest_labels(observed, labels):
    h, w = observed.shape
    pts = [(r, c) for r in range(h) for c in range(w) if observed[r, c]]  # row-major
    out = np.zeros((h, w), bool)
    for r in range(h):
        for c in range(w):
            best = None
            for (pr, pc) in pts:
                d = (pr - r) ** 2 + (pc - c) ** 2
                if best is None or d < best[0]:
                    best = (d, pr, pc)
            out[r, c] = labels[best[1], best[2]]
    return out


# --------------------------------------------------------------------------- boundary partition

def chebyshev_partition(f_star, u, radius):
    """Boundary = unobserved cells within Chebyshev ``radius`` of a floor edge cell;
    interior = unobserved floor whose whole radius-neighbourhood is in-bounds floor."""
    f = np.asarray(f_star, bool)
    h, w = f.shape

    def window_all_floor(r, c, rad):
        for dr in range(-rad, rad + 1):
            for dc in range(-rad, rad + 1):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not f[rr, cc]:
                    return False
        return True

    edge = np.zeros_like(f)
    for r in range(h):
        for c in range(w):
            edge[r, c] = f[r, c] and not window_all_floor(r, c, 1)
    er, ec = np.nonzero(edge)
    boundary = np.zeros_like(f)
    interior = np.zeros_like(f)
    for r in range(h):
        for c in range(w):
            if not u[r, c]:
                continue
            near = len(er) > 0 and np.max(np.stack([np.abs(er - r), np.abs(ec - c)]), axis=0).min() <= radius
            boundary[r, c] = near
            interior[r, c] = (not near) and f[r, c] and window_all_floor(r, c, radius)
    return interior, boundary


# --------------------------------------------------------------------------- metrics

def confusion_loop(pred, truth, mask):
    tp = fp = fn = tn = 0
    for p, t, m in zip(np.ravel(pred), np.ravel(truth), np.ravel(mask)):
        if not m:
            continue
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def jaccard_loop(a, b, mask):
    inter = union = 0
    for x, y, m in zip(np.ravel(a), np.ravel(b), np.ravel(mask)):
        if m:
            inter += bool(x and y)
            union += bool(x or y)
    return 0.0 if union == 0 else 1.0 - inter / union


def energy_direct(samples, truth, mask):
    k = len(samples)
    first = sum(jaccard_loop(s, truth, mask) for s in samples) / k
    if k == 1:
        return first
    second = 0.0
    for i in range(k):
        for j in range(k):
            if i != j:
                second += jaccard_loop(samples[i], samples[j], mask)
    return first - second / (2 * k * (k - 1))


def distributional_direct(preds, sols, mask, thr=0.1):
    d = [[jaccard_loop(p, s, mask) for s in sols] for p in preds]
    d_pg = sum(min(row) for row in d) / len(preds)
    cols = [min(d[i][j] for i in range(len(preds))) for j in range(len(sols))]
    d_gp = sum(cols) / len(sols)
    cov = sum(1 for x in cols if x < thr) / len(sols)
    div = None
    if len(preds) > 1:
        pairs = [jaccard_loop(a, b, mask) for a, b in combinations(preds, 2)]
        div = sum(pairs) / len(pairs)
    return d_pg, d_gp, (d_pg + d_gp) / 2, cov, div


# --------------------------------------------------------------------------- multi-solution

def multisolution_cells(f_obs, u, v, f_star):
    """Cell-by-cell construction from lists of boolean arrays."""
    n = len(f_obs)
    h, w = f_obs[0].shape
    f_syn = np.ones((h, w), bool)
    v_syn = np.ones((h, w), bool)
    u_syn = np.zeros((h, w), bool)
    promoted = 0
    for r in range(h):
        for c in range(w):
            f_syn[r, c] = all(f[r, c] for f in f_obs)
            v_syn[r, c] = all(x[r, c] for x in v)
            u_any = any(x[r, c] for x in u)
            all_seen = all(v[i][r, c] and not u[i][r, c] for i in range(n))
            labels = {bool(f_star[i][r, c]) for i in range(n)}
            conflict = all_seen and len(labels) > 1
            promoted += conflict
            u_syn[r, c] = u_any or conflict
    return f_syn, v_syn, u_syn, promoted
