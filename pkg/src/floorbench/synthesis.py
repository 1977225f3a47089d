"""Egocentric observation synthesis: camera placement, visibility, rasterization.

The observation canvas is a 512 x 512 grid spanning 10 m, with the camera
centred on pixel (col 256, row 384) looking along -row.  Average pooling by 2
yields the canonical 256 x 256 record at 0.0390625 m/cell with the camera
anchor at (col 128, row 192).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import _kernels
from .grid import BevGrid, downsample_binarize, read_png, write_png
from .rng import CounterRng
from .scene import SceneGeometry

CANVAS_SIZE = 512
CANVAS_RESOLUTION = 0.01953125
CAMERA_COL, CAMERA_ROW = 256, 384
EYE_HEIGHT = 1.25
HFOV = math.pi / 2
RAY_SAMPLES = 256
CHUNK_SIZE = 4096
POOL_FACTOR = 2
RECORD_SIZE = CANVAS_SIZE // POOL_FACTOR
RECORD_RESOLUTION = CANVAS_RESOLUTION * POOL_FACTOR
ANCHOR = (CAMERA_COL // POOL_FACTOR, CAMERA_ROW // POOL_FACTOR)

MIN_VALID_FRACTION = 0.10
MIN_FLOOR_CELLS = 100
MIN_OBSERVED_CELLS = 50

CANDIDATE_SPACING = 0.4
HEADING_COUNT = 36
MAX_ATTEMPTS = 500
DEFAULT_BUDGET = 24

CHANNELS = ("f_obs", "u", "f_star", "v")


class ObservationRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class UnusableSceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraPose:
    x: float
    y: float
    yaw: float
    height: float = EYE_HEIGHT
    hfov: float = HFOV

    def __post_init__(self):
        if not 0 <= self.yaw < 2 * math.pi:
            raise ValueError(f"yaw must lie in [0, 2pi), got {self.yaw}")

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "yaw": self.yaw, "height": self.height, "hfov": self.hfov}


@dataclass(frozen=True, eq=False)
class ObservationRecord:
    obs_id: str
    scene_id: str
    source_tag: str
    pose: CameraPose
    f_obs: BevGrid
    u: BevGrid
    f_star: BevGrid
    v: BevGrid
    r_cond: float | None = None
    seed: int | None = None
    anchor: tuple[int, int] = ANCHOR
    extra: dict = field(default_factory=dict)

    def channels(self) -> dict[str, BevGrid]:
        return {"f_obs": self.f_obs, "u": self.u, "f_star": self.f_star, "v": self.v}

    def observed(self) -> BevGrid:
        """Observation footprint: valid cells with direct line of sight."""
        return self.v.andnot(self.u)

    def invariant_violations(self) -> list[str]:
        out = []
        grids = list(self.channels().values())
        if any(g.shape != grids[0].shape or g.resolution != grids[0].resolution for g in grids):
            return ["shape mismatch"]
        if not self.f_obs.issubset(self.f_star):
            out.append("f_obs not within f_star")
        if (self.f_obs & self.u).any():
            out.append("f_obs intersects u")
        if not (self.f_obs | self.u).issubset(self.v):
            out.append("f_obs | u not within v")
        return out


def conditioning_ratio(f_obs: BevGrid, f_star: BevGrid) -> float | None:
    total = f_star.count()
    return f_obs.count() / total if total else None


# --------------------------------------------------------------------------- canvas geometry

@lru_cache(maxsize=4)
def _canvas_offsets(size: int, resolution: float):
    """Camera-frame (forward, right) offsets of canvas cell centres, plus the frustum."""
    rows, cols = np.mgrid[0:size, 0:size]
    ahead = CAMERA_ROW * size // CANVAS_SIZE - rows
    side = cols - CAMERA_COL * size // CANVAS_SIZE
    frustum = (ahead > 0) & (np.abs(side) <= ahead)
    forward = ahead * resolution
    right = side * resolution
    for a in (forward, right, frustum):
        a.flags.writeable = False
    return forward, right, frustum


def canvas_world_points(pose: CameraPose, size: int = CANVAS_SIZE, resolution: float = CANVAS_RESOLUTION):
    forward, right, _ = _canvas_offsets(size, resolution)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    wx = pose.x + forward * c + right * s
    wy = pose.y + forward * s - right * c
    return wx, wy


def _lookup(scene: SceneGeometry, wx: np.ndarray, wy: np.ndarray):
    fc, fr = scene.world_to_cell(wx, wy)
    ic = np.floor(fc + 0.5).astype(np.int64)
    ir = np.floor(fr + 0.5).astype(np.int64)
    h, w = scene.shape
    inside = (ir >= 0) & (ir < h) & (ic >= 0) & (ic < w)
    floor = np.zeros(wx.shape, dtype=bool)
    height = np.zeros(wx.shape, dtype=np.float32)
    floor[inside] = scene.floor_mask.cells[ir[inside], ic[inside]]
    height[inside] = scene.obstacle_height[ir[inside], ic[inside]]
    return fc, fr, floor, height


def _run_chunks(fn, n: int, chunk_size: int | None, executor: ThreadPoolExecutor | None):
    if not chunk_size or chunk_size >= n:
        fn(0, n)
        return
    spans = [(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]
    if executor is None:
        for a, b in spans:
            fn(a, b)
    else:
        list(executor.map(lambda ab: fn(*ab), spans))


def line_of_sight(
    scene: SceneGeometry,
    pose: CameraPose,
    size: int = CANVAS_SIZE,
    resolution: float = CANVAS_RESOLUTION,
    chunk_size: int | None = CHUNK_SIZE,
    executor: ThreadPoolExecutor | None = None,
):
    """Sample the scene on the canvas and ray-cast every frustum target.

    Returns ``(floor, footprint, los)`` boolean canvases: scene floor, scene
    footprint (floor or obstacle), and direct line of sight.  Floor targets
    are tested at floor level; obstacle targets at their top surface and
    never occlude themselves.
    """
    wx, wy = canvas_world_points(pose, size, resolution)
    fc, fr, floor, height = _lookup(scene, wx, wy)
    _, _, frustum = _canvas_offsets(size, resolution)
    footprint = floor | (height > 0)
    targets = np.flatnonzero(frustum & footprint)
    tcol = fc.ravel()[targets]
    trow = fr.ravel()[targets]
    is_floor = floor.ravel()[targets]
    theight = np.where(is_floor, 0.0, height.ravel()[targets].astype(np.float64))
    eye_col, eye_row = scene.world_to_cell(pose.x, pose.y)
    out = np.zeros(len(targets), dtype=np.bool_)
    heights = scene.obstacle_height
    occupancy = scene.occupancy_table()
    exclude = ~is_floor

    def work(a, b):
        _kernels.line_of_sight(
            heights, occupancy, float(eye_col), float(eye_row), float(pose.height),
            tcol[a:b], trow[a:b], theight[a:b], exclude[a:b], RAY_SAMPLES, out[a:b],
        )

    _run_chunks(work, len(targets), chunk_size, executor)
    los = np.zeros(size * size, dtype=bool)
    los[targets] = out
    return floor, footprint, los.reshape(size, size)


def visible_floor(scene: SceneGeometry, pose: CameraPose, **kw) -> BevGrid:
    """Floor cells inside the 90 degree frustum with an unoccluded sight line."""
    floor, _, los = line_of_sight(scene, pose, **kw)
    return BevGrid(floor & los, kw.get("resolution", CANVAS_RESOLUTION))


# --------------------------------------------------------------------------- observations

def rasterize_observation(
    scene: SceneGeometry,
    pose: CameraPose,
    obs_id: str = "",
    seed: int | None = None,
    chunk_size: int | None = CHUNK_SIZE,
) -> ObservationRecord:
    """Build the four aligned channels, or raise :class:`ObservationRejected`."""
    floor, footprint, los = line_of_sight(scene, pose, chunk_size=chunk_size)
    f_obs = floor & los
    u = footprint & ~los
    n = CANVAS_SIZE * CANVAS_SIZE
    if footprint.sum() < MIN_VALID_FRACTION * n:
        raise ObservationRejected("coverage", f"{footprint.sum()} valid cells")
    if floor.sum() < MIN_FLOOR_CELLS:
        raise ObservationRejected("floor", f"{floor.sum()} floor cells")
    if f_obs.sum() < MIN_OBSERVED_CELLS:
        raise ObservationRejected("observed-floor", f"{f_obs.sum()} observed floor cells")

    res = CANVAS_RESOLUTION
    f_obs_d = downsample_binarize(BevGrid(f_obs, res), POOL_FACTOR).cells
    u_d = downsample_binarize(BevGrid(u, res), POOL_FACTOR).cells
    f_star_d = downsample_binarize(BevGrid(floor, res), POOL_FACTOR).cells
    v_d = downsample_binarize(BevGrid(footprint, res), POOL_FACTOR).cells
    u_d = u_d & ~f_obs_d
    f_obs_d = f_obs_d & f_star_d
    # pooled observed cells must carry their true label; floor that lost its
    # observed majority is handed to the unobserved set
    u_d = u_d | (v_d & ~u_d & f_star_d & ~f_obs_d)

    grids = {k: BevGrid(a, RECORD_RESOLUTION) for k, a in zip(CHANNELS, (f_obs_d, u_d, f_star_d, v_d))}
    return ObservationRecord(
        obs_id=obs_id,
        scene_id=scene.scene_id,
        source_tag=scene.source_tag,
        pose=pose,
        r_cond=conditioning_ratio(grids["f_obs"], grids["f_star"]),
        seed=seed,
        **grids,
    )


def candidate_positions(scene: SceneGeometry, spacing: float = CANDIDATE_SPACING) -> np.ndarray:
    """Floor cells on a regular lattice of the given metric spacing, as (row, col)."""
    floor = scene.floor_mask.cells
    rows, cols = np.nonzero(floor)
    if len(rows) == 0:
        raise UnusableSceneError("scene has no floor")
    step = max(1, int(round(spacing / scene.resolution)))
    lattice_r = np.arange(rows.min(), rows.max() + 1, step)
    lattice_c = np.arange(cols.min(), cols.max() + 1, step)
    rr, cc = np.meshgrid(lattice_r, lattice_c, indexing="ij")
    keep = floor[rr, cc]
    return np.column_stack([rr[keep], cc[keep]])


def propose_poses(scene: SceneGeometry, seed: int, max_attempts: int = MAX_ATTEMPTS) -> list[CameraPose]:
    """Deterministic order of candidate poses.

    Greedy farthest-point traversal of the lattice, starting next to the
    floor centroid; each visited candidate is kept with a Gaussian
    centre-bias probability and given one of 36 headings.  Once every
    candidate has been visited the traversal restarts.
    """
    cand = candidate_positions(scene)
    floor_rc = np.argwhere(scene.floor_mask.cells)
    centroid = floor_rc.mean(axis=0)
    extent = (floor_rc.max(axis=0) - floor_rc.min(axis=0)) * scene.resolution
    sigma = 0.25 * float(np.hypot(*extent))
    d2 = (((cand - centroid) * scene.resolution) ** 2).sum(axis=1)
    weight = np.exp(-d2 / (2 * sigma ** 2)) if sigma > 0 else np.ones(len(cand))
    start = int(np.argmin(d2))

    rng = CounterRng("camera-proposals", seed)
    xs, ys = scene.cell_to_world(cand[:, 1], cand[:, 0])
    poses: list[CameraPose] = []
    available = np.ones(len(cand), dtype=bool)
    mind = np.full(len(cand), np.inf)
    visits = 0
    while len(poses) < max_attempts and visits < 100 * max_attempts:
        if not available.any():
            available[:] = True
            mind[:] = np.inf
        if np.isinf(mind[available]).all():
            idx = start if available[start] else int(np.flatnonzero(available)[0])
        else:
            masked = np.where(available, mind, -1.0)
            idx = int(np.argmax(masked))
        available[idx] = False
        visits += 1
        if rng.uniform(1)[0] >= weight[idx]:
            continue
        heading = int(rng.integers(1, HEADING_COUNT)[0])
        yaw = math.radians(heading * (360 // HEADING_COUNT))
        poses.append(CameraPose(float(xs[idx]), float(ys[idx]), yaw))
        mind = np.minimum(mind, ((cand - cand[idx]) ** 2).sum(axis=1) ** 0.5)
    return poses


@dataclass
class SceneSynthesis:
    records: list[ObservationRecord]
    rejections: Counter
    attempts: int


def synthesize_scene(
    scene: SceneGeometry,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    max_attempts: int = MAX_ATTEMPTS,
    workers: int = 1,
    chunk_size: int | None = CHUNK_SIZE,
) -> SceneSynthesis:
    """Evaluate proposals in order until ``budget`` observations are accepted.

    Proposals are fixed by the seed before any rasterization, so the result
    does not depend on ``workers`` or ``chunk_size``.
    """
    proposals = propose_poses(scene, seed, max_attempts)
    rejections: Counter = Counter()
    accepted: list[tuple[CameraPose, ObservationRecord]] = []

    def attempt(pose):
        try:
            return rasterize_observation(scene, pose, seed=seed, chunk_size=chunk_size)
        except ObservationRejected as exc:
            return exc

    attempts = 0
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        batch = max(1, workers)
        i = 0
        while i < len(proposals) and len(accepted) < budget:
            window = proposals[i: i + batch]
            results = list(executor.map(attempt, window)) if executor else [attempt(p) for p in window]
            for pose, res in zip(window, results):
                if len(accepted) >= budget:
                    break
                attempts += 1
                if isinstance(res, ObservationRejected):
                    rejections[res.reason] += 1
                else:
                    accepted.append((pose, res))
            i += batch
    finally:
        if executor:
            executor.shutdown()
    if not accepted:
        raise UnusableSceneError(f"no accepted pose after {attempts} attempts")
    records = []
    for k, (_, rec) in enumerate(accepted):
        obs_id = f"{scene.scene_id}_{k:03d}"
        records.append(replace(rec, obs_id=obs_id))
    return SceneSynthesis(records, rejections, attempts)


def sample_cameras(scene: SceneGeometry, budget: int = DEFAULT_BUDGET, seed: int = 0, **kw) -> list[CameraPose]:
    return [r.pose for r in synthesize_scene(scene, budget, seed, **kw).records]


# --------------------------------------------------------------------------- storage

def record_metadata(rec: ObservationRecord) -> dict:
    return {
        "obs_id": rec.obs_id,
        "scene_id": rec.scene_id,
        "source_tag": rec.source_tag,
        "pose": rec.pose.to_dict(),
        "seed": rec.seed,
        "r_cond": rec.r_cond,
        "resolution": rec.f_obs.resolution,
        "shape": list(rec.f_obs.shape),
        "anchor": list(rec.anchor),
        "thresholds": {
            "min_valid_fraction": MIN_VALID_FRACTION,
            "min_floor_cells": MIN_FLOOR_CELLS,
            "min_observed_cells": MIN_OBSERVED_CELLS,
        },
        **rec.extra,
    }


def write_observation(rec: ObservationRecord, directory: str | Path) -> dict:
    """Write the four channel PNGs and ``meta.json``; returns the metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, grid in rec.channels().items():
        write_png(grid, directory / f"{name}.png")
    meta = record_metadata(rec)
    (directory / "meta.json").write_text(json.dumps(meta, indent=None) + "\n", encoding="utf-8")
    return meta


def read_observation(directory: str | Path) -> ObservationRecord:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    res = float(meta["resolution"])
    grids = {name: read_png(directory / f"{name}.png", res) for name in CHANNELS}
    known = {"obs_id", "scene_id", "source_tag", "pose", "seed", "r_cond", "resolution", "shape", "anchor", "thresholds"}
    return ObservationRecord(
        obs_id=meta["obs_id"],
        scene_id=meta["scene_id"],
        source_tag=meta["source_tag"],
        pose=CameraPose(**meta["pose"]),
        r_cond=meta.get("r_cond"),
        seed=meta.get("seed"),
        anchor=tuple(meta.get("anchor", ANCHOR)),
        extra={k: v for k, v in meta.items() if k not in known},
        **grids,
    )
