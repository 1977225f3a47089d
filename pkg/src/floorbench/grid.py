"""Binary bird's-eye-view rasters and the mask algebra built on them.

Cells are indexed ``(row, col)`` with row 0 at the top, matching the PNG
layout used on disk.  A value of 1 marks the positive class (floor, observed,
valid, ...), 0 the negative class.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class GridCompositionError(ValueError):
    """Raised when grids of different shape or resolution are combined."""


class DegenerateMaskWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class BevGrid:
    """Immutable binary occupancy raster with a fixed metric resolution."""

    cells: np.ndarray
    resolution: float

    def __post_init__(self):
        arr = np.asarray(self.cells)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"grid must be a non-empty 2D array, got shape {arr.shape}")
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("grid cells must be exactly 0 or 1")
            arr = arr.astype(bool)
        elif arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "cells", arr)
        object.__setattr__(self, "resolution", float(self.resolution))

    @classmethod
    def zeros(cls, height: int, width: int, resolution: float) -> "BevGrid":
        return cls(np.zeros((height, width), dtype=bool), resolution)

    @classmethod
    def ones(cls, height: int, width: int, resolution: float) -> "BevGrid":
        return cls(np.ones((height, width), dtype=bool), resolution)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.cells))

    def any(self) -> bool:
        return bool(self.cells.any())

    def check_compatible(self, other: "BevGrid") -> None:
        if self.shape != other.shape or self.resolution != other.resolution:
            raise GridCompositionError(
                f"cannot compose {self.shape}@{self.resolution} with {other.shape}@{other.resolution}"
            )

    def _binary(self, other: "BevGrid", op) -> "BevGrid":
        self.check_compatible(other)
        return BevGrid(op(self.cells, other.cells), self.resolution)

    def __and__(self, other: "BevGrid") -> "BevGrid":
        return self._binary(other, np.logical_and)

    def __or__(self, other: "BevGrid") -> "BevGrid":
        return self._binary(other, np.logical_or)

    def __xor__(self, other: "BevGrid") -> "BevGrid":
        return self._binary(other, np.logical_xor)

    def __invert__(self) -> "BevGrid":
        return BevGrid(~self.cells, self.resolution)

    def andnot(self, other: "BevGrid") -> "BevGrid":
        return self._binary(other, lambda a, b: a & ~b)

    def issubset(self, other: "BevGrid") -> bool:
        self.check_compatible(other)
        return not np.any(self.cells & ~other.cells)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BevGrid):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.resolution == other.resolution
            and bool(np.array_equal(self.cells, other.cells))
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.resolution, self.packed()))

    def packed(self) -> bytes:
        """Row-major bit-packed cell bytes (MSB first)."""
        return np.packbits(self.cells, axis=None).tobytes()

    @classmethod
    def from_packed(cls, data: bytes, height: int, width: int, resolution: float) -> "BevGrid":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=height * width)
        return cls(bits.reshape(height, width).astype(bool), resolution)

    def __repr__(self) -> str:
        return f"BevGrid({self.height}x{self.width}, res={self.resolution}, set={self.count()})"


def eval_region(u: BevGrid, v: BevGrid) -> BevGrid:
    """Unobserved valid cells: the sole scoring support."""
    return u & v


def jaccard_distance(a: BevGrid, b: BevGrid, mask: BevGrid) -> float:
    """``1 - IoU`` of the positive cells of ``a`` and ``b`` inside ``mask``.

    Two empty positive sets are at distance 0.  An empty mask is degenerate:
    a warning is emitted and 0 is returned so pairwise sums stay total.
    """
    a.check_compatible(b)
    a.check_compatible(mask)
    if not mask.any():
        warnings.warn("jaccard_distance on an empty mask", DegenerateMaskWarning, stacklevel=2)
        return 0.0
    return masked_jaccard(a.cells, b.cells, mask.cells)


def masked_jaccard(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    am = a & mask
    bm = b & mask
    union = np.count_nonzero(am | bm)
    if union == 0:
        return 0.0
    return 1.0 - np.count_nonzero(am & bm) / union


def downsample_binarize(g: BevGrid, factor: int) -> BevGrid:
    """Average-pool ``factor x factor`` blocks; a block mean of 0.5 or more maps to 1."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    h, w = g.shape
    if h % factor or w % factor:
        raise ValueError(f"grid {g.shape} is not divisible by {factor}")
    blocks = g.cells.reshape(h // factor, factor, w // factor, factor)
    # integer count avoids float ties: mean >= 0.5  <=>  2 * count >= factor**2
    counts = blocks.sum(axis=(1, 3), dtype=np.int64)
    return BevGrid(2 * counts >= factor * factor, g.resolution * factor)


def _square(halfwidth: int) -> np.ndarray:
    return np.ones((2 * halfwidth + 1, 2 * halfwidth + 1), dtype=bool)


def erode(g: BevGrid, kernel_halfwidth: int) -> BevGrid:
    """Square-kernel erosion; cells beyond the border count as 0."""
    if kernel_halfwidth < 0:
        raise ValueError("kernel_halfwidth must be non-negative")
    if kernel_halfwidth == 0:
        return g
    out = ndimage.binary_erosion(g.cells, structure=_square(kernel_halfwidth), border_value=0)
    return BevGrid(out, g.resolution)


def dilate(g: BevGrid, kernel_halfwidth: int) -> BevGrid:
    """Square-kernel dilation; cells beyond the border are absent."""
    if kernel_halfwidth < 0:
        raise ValueError("kernel_halfwidth must be non-negative")
    if kernel_halfwidth == 0:
        return g
    out = ndimage.binary_dilation(g.cells, structure=_square(kernel_halfwidth), border_value=0)
    return BevGrid(out, g.resolution)


def write_png(g: BevGrid, path: str | Path) -> None:
    """8-bit grayscale PNG with values exactly {0, 255}."""
    img = Image.fromarray(g.cells.astype(np.uint8) * 255)
    img.save(path, format="PNG", optimize=False)


def read_png(path: str | Path, resolution: float, threshold: int = 128) -> BevGrid:
    """Load an 8-bit PNG; pixel values ``>= threshold`` read as 1."""
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return BevGrid(arr >= threshold, resolution)
