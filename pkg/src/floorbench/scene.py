"""Mesh ingestion and the 2.5D scene representation used for synthesis."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .grid import BevGrid

SCENE_RESOLUTION = 0.01
ROBOT_CEILING = 1.25
FLOOR_PERCENTILE = 15
FLOOR_TOLERANCE = 0.05
SURFACE_SPACING = 0.005
# NYU40 class id for floor, used by the semantic-label meshes we ingest
DEFAULT_FLOOR_LABELS = (2,)

AXIS_TRANSFORMS = {
    "identity": np.eye(3),
    "swap_yz": np.array([[1.0, 0, 0], [0, 0, 1.0], [0, 1.0, 0]]),
    "flip_z": np.diag([1.0, 1.0, -1.0]),
}

DEFAULT_SOURCE_TRANSFORMS = {
    "3rscan": "flip_z",
    "scannet": "identity",
    "arkitscenes": "swap_yz",
    "matterport3d": "identity",
    "scannetpp": "identity",
    "procgen": "identity",
}


class MeshParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class FloorExtractionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeshAsset:
    vertices: np.ndarray
    triangles: np.ndarray
    floor_faces: np.ndarray | None = None
    axis_transform: str = "identity"
    source_tag: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.floor_faces is not None:
            ff = np.asarray(self.floor_faces, dtype=bool)
            if ff.shape != (len(t),):
                raise ValueError("floor_faces must have one entry per triangle")
            object.__setattr__(self, "floor_faces", ff)


@dataclass(frozen=True, eq=False)
class SceneGeometry:
    """Floor mask plus obstacle height field at synthesis resolution.

    ``origin`` holds the world (x, y) of the centre of cell (0, 0); columns
    grow along +x and rows along -y.
    """

    floor_mask: BevGrid
    obstacle_height: np.ndarray
    floor_z: float
    origin: tuple[float, float]
    source_tag: str = ""
    scene_id: str = ""
    ceiling: float = ROBOT_CEILING

    def __post_init__(self):
        h = np.array(self.obstacle_height, dtype=np.float32)
        if h.shape != self.floor_mask.shape:
            raise ValueError("floor_mask and obstacle_height must share dimensions")
        if not np.isfinite(self.floor_z):
            raise ValueError("floor_z must be finite")
        if h.min(initial=0.0) < 0 or h.max(initial=0.0) > self.ceiling:
            raise ValueError(f"obstacle heights must lie in [0, {self.ceiling}]")
        h.flags.writeable = False
        object.__setattr__(self, "obstacle_height", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def resolution(self) -> float:
        return self.floor_mask.resolution

    @property
    def shape(self) -> tuple[int, int]:
        return self.floor_mask.shape

    def obstacle_mask(self) -> np.ndarray:
        return self.obstacle_height > 0

    def occupancy_table(self) -> np.ndarray:
        """Cached summed-area table of the obstacle mask (used by ray casting)."""
        table = self.__dict__.get("_occupancy")
        if table is None:
            table = _kernels.occupancy_table(self.obstacle_height)
            object.__setattr__(self, "_occupancy", table)
        return table

    def footprint(self) -> np.ndarray:
        return self.floor_mask.cells | self.obstacle_mask()

    def world_to_cell(self, x, y):
        """Fractional (col, row) of world points."""
        return (np.asarray(x) - self.origin[0]) / self.resolution, (self.origin[1] - np.asarray(y)) / self.resolution

    def cell_to_world(self, col, row):
        return self.origin[0] + np.asarray(col) * self.resolution, self.origin[1] - np.asarray(row) * self.resolution

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.floor_mask.packed())
        h.update(np.ascontiguousarray(self.obstacle_height).tobytes())
        h.update(repr((self.shape, self.floor_z, self.origin, self.resolution, self.ceiling)).encode())
        return h.hexdigest()


def resolve_axis_transform(spec: str | np.ndarray | Sequence[float]) -> np.ndarray:
    """Name (``identity``, ``swap_yz``, ``flip_z``) or custom 3x3 / 3x4 / 4x4 matrix -> 4x4."""
    if isinstance(spec, str):
        key = spec.strip().lower().replace("-", "_")
        if key in AXIS_TRANSFORMS:
            m = np.eye(4)
            m[:3, :3] = AXIS_TRANSFORMS[key]
            return m
        values = [float(x) for x in re.split(r"[\s,]+", spec.strip().lower().removeprefix("custom:").strip()) if x]
        spec = values
    arr = np.asarray(spec, dtype=np.float64)
    if arr.size == 9:
        m = np.eye(4)
        m[:3, :3] = arr.reshape(3, 3)
    elif arr.size == 12:
        m = np.eye(4)
        m[:3, :] = arr.reshape(3, 4)
    elif arr.size == 16:
        m = arr.reshape(4, 4).copy()
    else:
        raise ValueError(f"unrecognised axis transform {spec!r}")
    lin = m[:3, :3]
    if not np.allclose(lin.T @ lin, np.eye(3), atol=1e-9):
        raise ValueError("axis transform must be orthonormal (reflections allowed)")
    return m


def apply_axis_transform(vertices: np.ndarray, spec) -> np.ndarray:
    m = resolve_axis_transform(spec)
    return vertices @ m[:3, :3].T + m[:3, 3]


def transform_for_source(source_tag: str, table: Mapping[str, str] | None = None) -> str:
    table = DEFAULT_SOURCE_TRANSFORMS if table is None else {**DEFAULT_SOURCE_TRANSFORMS, **table}
    return table.get(source_tag.lower(), "identity")


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)

    def has_lists(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise MeshParseError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise MeshParseError("header has no end_header", len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[_PlyElement] = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise MeshParseError("malformed format line", line_offset)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise MeshParseError(f"malformed element line {raw!r}", line_offset)
            elements.append(_PlyElement(tokens[1], int(tokens[2])))
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError("property before any element", line_offset)
            if tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise MeshParseError(f"unsupported list property {raw!r}", line_offset)
                elements[-1].props.append((tokens[4], _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise MeshParseError(f"unsupported property type {raw!r}", line_offset)
                elements[-1].props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise MeshParseError(f"unexpected header line {raw!r}", line_offset)
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshParseError(f"unsupported PLY format {fmt!r}", 0)
    return fmt, elements, body_start


def _read_ply_ascii(data: bytes, elements, body_start):
    lines = data[body_start:].split(b"\n")
    # byte offset of each body line, for error reporting
    starts = np.concatenate([[0], np.cumsum([len(ln) + 1 for ln in lines])]) + body_start
    out = {}
    li = 0
    for el in elements:
        rows = []
        for k in range(el.count):
            while li < len(lines) and not lines[li].strip():
                li += 1
            if li >= len(lines):
                raise MeshParseError(
                    f"element '{el.name}' declares {el.count} entries but only {k} are present", len(data)
                )
            tokens = lines[li].split()
            rows.append(tokens)
            li += 1
        out[el.name] = _decode_ascii_rows(el, rows, starts, li - el.count)
    return out


def _decode_ascii_rows(el, rows, starts, first_line):
    cols: dict[str, list] = {p[0]: [] for p in el.props}
    for n, tokens in enumerate(rows):
        pos = 0
        try:
            for p in el.props:
                if len(p) == 3:
                    cnt = int(tokens[pos])
                    cols[p[0]].append([float(t) for t in tokens[pos + 1: pos + 1 + cnt]])
                    if len(cols[p[0]][-1]) != cnt:
                        raise IndexError
                    pos += 1 + cnt
                else:
                    cols[p[0]].append(float(tokens[pos]))
                    pos += 1
            if pos != len(tokens):
                raise IndexError
        except (IndexError, ValueError):
            raise MeshParseError(
                f"malformed '{el.name}' entry {n}", int(starts[first_line + n])
            ) from None
    return cols


def _read_ply_binary(data: bytes, elements, body_start):
    out = {}
    pos = body_start
    for el in elements:
        if not el.has_lists():
            dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
            need = dt.itemsize * el.count
            if pos + need > len(data):
                have = (len(data) - pos) // max(dt.itemsize, 1)
                raise MeshParseError(
                    f"element '{el.name}' declares {el.count} entries but only {have} are present", len(data)
                )
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            out[el.name] = {p[0]: arr[p[0]].astype(np.float64) for p in el.props}
            pos += need
            continue
        cols: dict[str, list] = {p[0]: [] for p in el.props}
        for n in range(el.count):
            for p in el.props:
                if len(p) == 3:
                    cdt, idt = np.dtype("<" + p[1]), np.dtype("<" + p[2])
                    if pos + cdt.itemsize > len(data):
                        raise MeshParseError(
                            f"element '{el.name}' declares {el.count} entries but only {n} are present", pos
                        )
                    cnt = int(np.frombuffer(data, dtype=cdt, count=1, offset=pos)[0])
                    pos += cdt.itemsize
                    if pos + cnt * idt.itemsize > len(data):
                        raise MeshParseError(f"truncated list in '{el.name}' entry {n}", pos)
                    cols[p[0]].append(np.frombuffer(data, dtype=idt, count=cnt, offset=pos).tolist())
                    pos += cnt * idt.itemsize
                else:
                    sdt = np.dtype("<" + p[1])
                    if pos + sdt.itemsize > len(data):
                        raise MeshParseError(
                            f"element '{el.name}' declares {el.count} entries but only {n} are present", pos
                        )
                    cols[p[0]].append(float(np.frombuffer(data, dtype=sdt, count=1, offset=pos)[0]))
                    pos += sdt.itemsize
        out[el.name] = cols
    return out


def _triangulate(polys) -> tuple[np.ndarray, np.ndarray]:
    """Fan-triangulate index lists; returns (triangles, source polygon index)."""
    tris, src = [], []
    for i, poly in enumerate(polys):
        poly = [int(x) for x in poly]
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
            src.append(i)
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3), np.asarray(src, dtype=np.int64)


def _parse_ply(data: bytes, floor_labels) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    fmt, elements, body_start = _parse_ply_header(data)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise MeshParseError("no vertex element", 0)
    vel = elements[names.index("vertex")]
    for axis in "xyz":
        if axis not in [p[0] for p in vel.props]:
            raise MeshParseError(f"vertex element lacks '{axis}'", 0)
    fel = elements[names.index("face")] if "face" in names else None
    if fel is not None and not any(len(p) == 3 and p[0] in ("vertex_indices", "vertex_index") for p in fel.props):
        raise MeshParseError("face element lacks a vertex_indices list", 0)
    body = _read_ply_ascii(data, elements, body_start) if fmt == "ascii" else _read_ply_binary(data, elements, body_start)
    vcols = body["vertex"]
    vertices = np.column_stack([np.asarray(vcols[a], dtype=np.float64) for a in "xyz"]) if vel.count else np.zeros((0, 3))
    if fel is None:
        return vertices, np.zeros((0, 3), dtype=np.int64), None
    fcols = body["face"]
    key = "vertex_indices" if "vertex_indices" in fcols else "vertex_index"
    tris, src = _triangulate(fcols[key])
    if tris.size and (tris.min() < 0 or tris.max() >= len(vertices)):
        bad = int(src[np.argmax((tris < 0).any(1) | (tris >= len(vertices)).any(1))])
        raise MeshParseError(f"face {bad} references a vertex index out of range [0, {len(vertices)})")
    floor = None
    labels = set(int(x) for x in floor_labels)
    if "label" in fcols:
        face_lab = np.asarray(fcols["label"], dtype=np.int64)
        floor = np.isin(face_lab, list(labels))[src]
    elif "label" in vcols:
        vert_floor = np.isin(np.asarray(vcols["label"], dtype=np.int64), list(labels))
        floor = vert_floor[tris].all(axis=1)
    return vertices, tris, floor


# --------------------------------------------------------------------------- OBJ

def _parse_obj(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    vertices: list[tuple[float, float, float]] = []
    polys: list[list[int]] = []
    poly_floor: list[bool] = []
    labelled = False
    current = ""
    offset = 0
    for raw in data.split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        line = raw.split(b"#", 1)[0].decode("utf-8", errors="replace").strip()
        if not line:
            continue
        tag, _, rest = line.partition(" ")
        if tag == "v":
            parts = rest.split()
            if len(parts) < 3:
                raise MeshParseError("vertex with fewer than 3 coordinates", line_offset)
            try:
                vertices.append((float(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError:
                raise MeshParseError(f"bad vertex {line!r}", line_offset) from None
        elif tag == "f":
            idx = []
            for tok in rest.split():
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise MeshParseError(f"bad face index {tok!r}", line_offset) from None
                # negative indices count back from the latest vertex
                i = i - 1 if i > 0 else len(vertices) + i
                if i < 0 or i >= len(vertices) or tok.startswith("0"):
                    raise MeshParseError(f"face index {tok} out of range", line_offset)
                idx.append(i)
            if len(idx) < 3:
                raise MeshParseError("face with fewer than 3 vertices", line_offset)
            polys.append(idx)
            poly_floor.append("floor" in current.lower())
        elif tag in ("g", "o", "usemtl"):
            labelled = True
            current = rest.strip()
        elif tag in ("vn", "vt", "vp", "s", "mtllib", "l", "p"):
            continue
        else:
            raise MeshParseError(f"unsupported OBJ statement {tag!r}", line_offset)
    tris, src = _triangulate(polys)
    floor = np.asarray(poly_floor, dtype=bool)[src] if labelled else None
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), tris, floor


def parse_mesh(
    path: str | Path,
    format: str | None = None,
    source_tag: str = "",
    axis_transform: str | None = None,
    transform_table: Mapping[str, str] | None = None,
    floor_labels: Sequence[int] = DEFAULT_FLOOR_LABELS,
) -> MeshAsset:
    """Load a PLY (ASCII or binary little-endian) or OBJ mesh.

    The axis transform defaults to the one registered for ``source_tag``.
    Semantic floor labels come from a PLY ``label`` property (face or vertex)
    matching ``floor_labels``, or from OBJ group/object/material names that
    contain "floor".
    """
    path = Path(path)
    data = path.read_bytes()
    if format is None:
        format = "obj" if path.suffix.lower() == ".obj" else "ply"
    fmt = format.lower().replace("_", "-")
    if fmt.startswith("ply"):
        vertices, tris, floor = _parse_ply(data, floor_labels)
    elif fmt == "obj":
        vertices, tris, floor = _parse_obj(data)
    else:
        raise ValueError(f"unsupported mesh format {format!r}")
    if axis_transform is None:
        axis_transform = transform_for_source(source_tag, transform_table)
    vertices = apply_axis_transform(vertices, axis_transform)
    return MeshAsset(vertices, tris, floor, axis_transform=str(axis_transform), source_tag=source_tag)


def write_ply_ascii(path: str | Path, vertices: np.ndarray, triangles: np.ndarray, face_labels=None) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(triangles)}",
        "property list uchar int vertex_indices",
    ]
    if face_labels is not None:
        lines.append("property int label")
    lines.append("end_header")
    for v in vertices:
        lines.append(" ".join(repr(float(x)) for x in v[:3]))
    for i, t in enumerate(triangles):
        row = f"3 {int(t[0])} {int(t[1])} {int(t[2])}"
        if face_labels is not None:
            row += f" {int(face_labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# --------------------------------------------------------------------------- floor extraction

def nearest_rank_percentile(values: np.ndarray, pct: int) -> float:
    """The ceil(pct/100 * n)-th order statistic (1-based), in integer arithmetic."""
    n = len(values)
    if n == 0:
        raise ValueError("empty input")
    rank = max(1, (pct * n + 99) // 100)
    return float(np.partition(values, rank - 1)[rank - 1])


def extract_floor(
    mesh: MeshAsset,
    mode: str = "semantic",
    resolution: float = SCENE_RESOLUTION,
    ceiling: float = ROBOT_CEILING,
    tolerance: float = FLOOR_TOLERANCE,
    scene_id: str = "",
) -> SceneGeometry:
    if len(mesh.vertices) == 0 or len(mesh.triangles) == 0:
        raise FloorExtractionError("mesh is empty")
    verts, tris = mesh.vertices, mesh.triangles
    z = verts[:, 2]
    if mode == "semantic":
        if mesh.floor_faces is None:
            raise FloorExtractionError("semantic mode needs floor labels")
        floor_faces = mesh.floor_faces
        if not floor_faces.any():
            raise FloorExtractionError("no faces carry a floor label")
        floor_z = float(np.median(z[np.unique(tris[floor_faces])]))
    elif mode in ("height-percentile", "percentile"):
        floor_z = nearest_rank_percentile(z, FLOOR_PERCENTILE)
        on_floor = np.abs(z - floor_z) <= tolerance
        floor_faces = on_floor[tris].all(axis=1)
    else:
        raise ValueError(f"unknown floor mode {mode!r}")

    min_x, max_x = verts[:, 0].min(), verts[:, 0].max()
    min_y, max_y = verts[:, 1].min(), verts[:, 1].max()
    width = int(np.floor((max_x - min_x) / resolution + 0.5)) + 1
    height = int(np.floor((max_y - min_y) / resolution + 0.5)) + 1
    cells = np.column_stack([(verts[:, 0] - min_x) / resolution, (max_y - verts[:, 1]) / resolution, z - floor_z])

    fill = np.zeros((height, width), dtype=bool)
    if floor_faces.any():
        _kernels.fill_triangles(np.ascontiguousarray(cells[tris[floor_faces]][:, :, :2]), height, width, fill)
    heights = np.zeros((height, width), dtype=np.float64)
    other = ~floor_faces
    if other.any():
        _kernels.splat_surface(
            np.ascontiguousarray(cells[tris[other]]), float(ceiling), SURFACE_SPACING / resolution, resolution, heights
        )
    floor = fill & ~(heights > 0)
    if not floor.any():
        raise FloorExtractionError("floor is empty after extraction")
    return SceneGeometry(
        BevGrid(floor, resolution),
        np.minimum(heights, ceiling).astype(np.float32),
        floor_z,
        (float(min_x), float(max_y)),
        source_tag=mesh.source_tag,
        scene_id=scene_id,
        ceiling=ceiling,
    )
