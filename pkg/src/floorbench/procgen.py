"""Deterministic procedural indoor layouts: rooms, doorways, furniture boxes.

Layouts live on the integer cell lattice of the synthesis grid, so the direct
raster and the exported mesh describe exactly the same cells.  Rectangles are
inclusive ``(r0, c0, r1, c1)`` cell ranges; mesh faces run through the
centres of their edge cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import BevGrid
from .rng import CounterRng
from .scene import ROBOT_CEILING, SCENE_RESOLUTION, SceneGeometry, write_ply_ascii

Rect = tuple[int, int, int, int]

FLOOR_LABEL = 2
WALL_LABEL = 1
FURNITURE_LABEL = 7
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class LayoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayoutSpec:
    seed: int = 0
    room_count: int = 3
    room_size: tuple[float, float] = (2.5, 5.0)
    doorway_width: tuple[float, float] = (0.8, 1.0)
    furniture_count: tuple[int, int] = (0, 3)
    furniture_size: tuple[float, float] = (0.3, 1.2)
    furniture_height: tuple[float, float] = (0.4, 1.2)
    wall_thickness: float = 0.1
    wall_height: float = 2.5
    furniture_seed: int | None = None
    resolution: float = SCENE_RESOLUTION
    max_retries: int = 200

    def __post_init__(self):
        for name in ("room_size", "doorway_width", "furniture_size", "furniture_height"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) range")
        lo, hi = self.furniture_count
        if not 0 <= lo <= hi:
            raise ValueError("furniture_count must be a non-negative (lo, hi) range")
        if self.room_count < 1:
            raise ValueError("room_count must be at least 1")
        if self.wall_thickness <= 0 or self.wall_height <= 0:
            raise ValueError("wall dimensions must be positive")
        if self.doorway_width[0] / self.resolution < 3 - 1e-9:
            raise ValueError("doorways must span at least 3 cells")

    def cells(self, metres: float) -> int:
        return max(1, int(round(metres / self.resolution)))


@dataclass
class Layout:
    spec: LayoutSpec
    rooms: list[Rect]
    doors: list[Rect]
    walls: list[Rect]
    furniture: list[tuple[Rect, float]] = field(default_factory=list)
    shape: tuple[int, int] = (0, 0)

    @property
    def resolution(self) -> float:
        return self.spec.resolution

    def _paint(self, rects, value=True, dtype=bool):
        out = np.zeros(self.shape, dtype=dtype)
        for r0, c0, r1, c1 in rects:
            out[r0: r1 + 1, c0: c1 + 1] = value
        return out

    def floor_mask(self) -> np.ndarray:
        floor = self._paint(self.rooms) | self._paint(self.doors)
        floor &= ~self._paint(self.walls)
        for rect, _ in self.furniture:
            r0, c0, r1, c1 = rect
            floor[r0: r1 + 1, c0: c1 + 1] = False
        return floor

    def obstacle_height(self) -> np.ndarray:
        h = np.zeros(self.shape, dtype=np.float32)
        h[self._paint(self.walls)] = min(self.spec.wall_height, ROBOT_CEILING)
        for (r0, c0, r1, c1), fh in self.furniture:
            h[r0: r1 + 1, c0: c1 + 1] = min(fh, ROBOT_CEILING)
        return h

    def origin(self) -> tuple[float, float]:
        return 0.0, (self.shape[0] - 1) * self.resolution

    def to_scene(self, scene_id: str = "", source_tag: str = "procgen") -> SceneGeometry:
        return SceneGeometry(
            BevGrid(self.floor_mask(), self.resolution),
            self.obstacle_height(),
            0.0,
            self.origin(),
            source_tag=source_tag,
            scene_id=scene_id,
        )

    def to_mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vertices, triangles, and NYU40-style face labels of the layout."""
        res = self.resolution
        top_row = self.shape[0] - 1
        verts: list[tuple[float, float, float]] = []
        tris: list[tuple[int, int, int]] = []
        labels: list[int] = []

        def corner(r, c, z):
            verts.append((c * res, (top_row - r) * res, z))
            return len(verts) - 1

        def quad(a, b, c, d, label):
            tris.extend([(a, b, c), (a, c, d)])
            labels.extend([label, label])

        for r0, c0, r1, c1 in self.rooms + self.doors:
            quad(corner(r0, c0, 0.0), corner(r1, c0, 0.0), corner(r1, c1, 0.0), corner(r0, c1, 0.0), FLOOR_LABEL)

        def box(rect, z, label):
            r0, c0, r1, c1 = rect
            b = [corner(r0, c0, 0.0), corner(r1, c0, 0.0), corner(r1, c1, 0.0), corner(r0, c1, 0.0)]
            t = [corner(r0, c0, z), corner(r1, c0, z), corner(r1, c1, z), corner(r0, c1, z)]
            for i in range(4):
                j = (i + 1) % 4
                quad(b[i], b[j], t[j], t[i], label)
            quad(t[0], t[1], t[2], t[3], label)

        for rect in self.walls:
            box(rect, self.spec.wall_height, WALL_LABEL)
        for rect, fh in self.furniture:
            box(rect, fh, FURNITURE_LABEL)
        return np.asarray(verts), np.asarray(tris, dtype=np.int64), np.asarray(labels, dtype=np.int64)

    def export_ply(self, path: str | Path) -> None:
        verts, tris, labels = self.to_mesh()
        write_ply_ascii(path, verts, tris, labels)


def _overlaps(a: Rect, b: Rect) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def _grow(rect: Rect, n: int) -> Rect:
    return rect[0] - n, rect[1] - n, rect[2] + n, rect[3] + n


def _subtract(rect: Rect, hole: Rect) -> list[Rect]:
    if not _overlaps(rect, hole):
        return [rect]
    r0, c0, r1, c1 = rect
    h0, g0, h1, g1 = max(hole[0], r0), max(hole[1], c0), min(hole[2], r1), min(hole[3], c1)
    out = []
    if r0 < h0:
        out.append((r0, c0, h0 - 1, c1))
    if h1 < r1:
        out.append((h1 + 1, c0, r1, c1))
    if c0 < g0:
        out.append((h0, c0, h1, g0 - 1))
    if g1 < c1:
        out.append((h0, g1 + 1, h1, c1))
    return out


def _ring(interior: Rect, t: int) -> list[Rect]:
    r0, c0, r1, c1 = interior
    return [
        (r0 - t, c0 - t, r0 - 1, c1 + t),
        (r1 + 1, c0 - t, r1 + t, c1 + t),
        (r0, c0 - t, r1, c0 - 1),
        (r0, c1 + 1, r1, c1 + t),
    ]


class _Sampler:
    def __init__(self, *key):
        self._rng = CounterRng(*key)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * float(self._rng.uniform(1)[0])

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        return lo + int(self._rng.integers(1, hi - lo + 1)[0])


def _place_rooms(spec: LayoutSpec, rng: _Sampler):
    t = spec.cells(spec.wall_thickness)
    lo, hi = spec.cells(spec.room_size[0]), spec.cells(spec.room_size[1])
    dlo, dhi = spec.cells(spec.doorway_width[0]), spec.cells(spec.doorway_width[1])
    rooms = [(0, 0, rng.integer(lo, hi) - 1, rng.integer(lo, hi) - 1)]
    doors: list[Rect] = []
    tries = 0
    while len(rooms) < spec.room_count:
        tries += 1
        if tries > spec.max_retries:
            raise LayoutError(f"could only place {len(rooms)} of {spec.room_count} rooms")
        base = rooms[rng.integer(0, len(rooms) - 1)]
        side = rng.integer(0, 3)
        h, w = rng.integer(lo, hi), rng.integer(lo, hi)
        dw = rng.integer(dlo, dhi)
        margin = t
        br0, bc0, br1, bc1 = base
        span = dw + 2 * margin
        if side in (0, 1):  # east / west: overlap along rows
            if br0 - h + span > br1 - span + 1:
                continue
            r0 = rng.integer(br0 - h + span, br1 - span + 1)
            c0 = bc1 + t + 1 if side == 0 else bc0 - t - w
            new = (r0, c0, r0 + h - 1, c0 + w - 1)
            ov0, ov1 = max(br0, new[0]), min(br1, new[2])
            if ov1 - ov0 + 1 < span:
                continue
            d0 = rng.integer(ov0 + margin, ov1 - margin - dw + 1)
            wc0, wc1 = (bc1 + 1, bc1 + t) if side == 0 else (bc0 - t, bc0 - 1)
            door = (d0, wc0, d0 + dw - 1, wc1)
        else:  # south / north: overlap along columns
            if bc0 - w + span > bc1 - span + 1:
                continue
            c0 = rng.integer(bc0 - w + span, bc1 - span + 1)
            r0 = br1 + t + 1 if side == 2 else br0 - t - h
            new = (r0, c0, r0 + h - 1, c0 + w - 1)
            ov0, ov1 = max(bc0, new[1]), min(bc1, new[3])
            if ov1 - ov0 + 1 < span:
                continue
            d0 = rng.integer(ov0 + margin, ov1 - margin - dw + 1)
            wr0, wr1 = (br1 + 1, br1 + t) if side == 2 else (br0 - t, br0 - 1)
            door = (wr0, d0, wr1, d0 + dw - 1)
        outer = _grow(new, t)
        if any(_overlaps(outer, r) or _overlaps(new, _grow(r, t)) for r in rooms):
            continue
        rooms.append(new)
        doors.append(door)
    return rooms, doors, t


def _place_furniture(spec, rooms, doors, floor, rng):
    furniture = []
    lo, hi = spec.furniture_count
    slo, shi = spec.cells(spec.furniture_size[0]), spec.cells(spec.furniture_size[1])
    keep_out = [_grow(d, spec.cells(0.6)) for d in doors]
    for room in rooms:
        n = rng.integer(lo, hi)
        for _ in range(n):
            for _attempt in range(20):
                h, w = rng.integer(slo, shi), rng.integer(slo, shi)
                # at least one free cell between furniture and walls
                r0 = rng.integer(room[0] + 1, room[2] - 1 - h + 1) if room[2] - room[0] - 1 >= h else None
                c0 = rng.integer(room[1] + 1, room[3] - 1 - w + 1) if room[3] - room[1] - 1 >= w else None
                if r0 is None or c0 is None:
                    break
                rect = (r0, c0, r0 + h - 1, c0 + w - 1)
                if any(_overlaps(rect, k) for k in keep_out):
                    continue
                if any(_overlaps(_grow(rect, 1), f) for f, _ in furniture):
                    continue
                trial = floor.copy()
                trial[rect[0]: rect[2] + 1, rect[1]: rect[3] + 1] = False
                _, ncomp = ndimage.label(trial, structure=_FOUR_CONNECTED)
                if ncomp != 1:
                    continue
                fh = spec.furniture_height[0] + (spec.furniture_height[1] - spec.furniture_height[0]) * rng.uniform(0, 1)
                furniture.append((rect, float(np.float32(fh))))
                floor = trial
                break
    return furniture


def build_layout(spec: LayoutSpec) -> Layout:
    rng = _Sampler("procgen-rooms", spec.seed)
    rooms, doors, t = _place_rooms(spec, rng)
    outers = [_grow(r, t) for r in rooms]
    rmin = min(o[0] for o in outers)
    cmin = min(o[1] for o in outers)
    shift = lambda r: (r[0] - rmin, r[1] - cmin, r[2] - rmin, r[3] - cmin)  # noqa: E731
    rooms = [shift(r) for r in rooms]
    doors = [shift(d) for d in doors]
    outers = [shift(o) for o in outers]
    shape = (max(o[2] for o in outers) + 1, max(o[3] for o in outers) + 1)

    walls: list[Rect] = []
    for room in rooms:
        walls.extend(_ring(room, t))
    for door in doors:
        walls = [piece for w in walls for piece in _subtract(w, door)]

    layout = Layout(spec, rooms, doors, walls, [], shape)
    floor = layout.floor_mask()
    fseed = spec.seed if spec.furniture_seed is None else spec.furniture_seed
    layout.furniture = _place_furniture(spec, rooms, doors, floor, _Sampler("procgen-furniture", fseed))
    _, ncomp = ndimage.label(layout.floor_mask(), structure=_FOUR_CONNECTED)
    if ncomp != 1:
        raise LayoutError("generated floor is not 4-connected")
    return layout


def generate(spec: LayoutSpec, scene_id: str = "", source_tag: str = "procgen") -> SceneGeometry:
    return build_layout(spec).to_scene(scene_id=scene_id, source_tag=source_tag)


def single_room_spec(size_m: float = 10.0, seed: int = 0, furniture: tuple[int, int] = (0, 0), **kw) -> LayoutSpec:
    """A one-room layout with a fixed interior side length."""
    return LayoutSpec(seed=seed, room_count=1, room_size=(size_m, size_m), furniture_count=furniture, **kw)


def random_spec(index: int, seed: int = 0) -> LayoutSpec:
    """Varied layout parameters for corpus generation."""
    rng = _Sampler("procgen-spec", seed, index)
    rooms = rng.integer(1, 4)
    lo = rng.uniform(2.5, 4.0)
    hi = lo + rng.uniform(0.5, 3.0)
    return LayoutSpec(
        seed=int(CounterRng("procgen-seed", seed, index).raw(1)[0] >> np.uint64(33)),
        room_count=rooms,
        room_size=(round(lo, 2), round(hi, 2)),
        furniture_count=(0, rng.integer(1, 4)),
    )

