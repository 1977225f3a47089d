"""Parameter-free completers and the shared post-processing path.

Every completion, built-in or external, goes through the same two steps
before scoring: a fixed 0.5 threshold and the evidence clamp
``f_obs | (u & pred)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .grid import BevGrid, GridCompositionError, read_png, write_png
from .rng import CounterRng

METHODS = ("all_obstacle", "all_floor", "nn_prop", "uniform_random")
THRESHOLD = 0.5
_PRED_NAME = re.compile(r"^(?P<obs>.+)_s(?P<k>\d+)\.png$")


class NoEvidenceError(ValueError):
    """The observation footprint is empty, so there is nothing to propagate."""


class UnknownMethodError(ValueError):
    pass


class MissingPredictionError(FileNotFoundError):
    pass


@dataclass(frozen=True, eq=False)
class SampleSet:
    obs_id: str
    samples: tuple[BevGrid, ...]
    method_tag: str

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ValueError("a sample set needs at least one sample")
        for s in samples[1:]:
            samples[0].check_compatible(s)
        object.__setattr__(self, "samples", samples)

    @property
    def k(self) -> int:
        return len(self.samples)

    def stack(self) -> np.ndarray:
        return np.stack([s.cells for s in self.samples])

    def prefix(self, n: int) -> "SampleSet":
        return SampleSet(self.obs_id, self.samples[:n], self.method_tag)


def threshold(pred: np.ndarray | BevGrid, resolution: float | None = None, level: float = THRESHOLD) -> BevGrid:
    """Binarize a real-valued map (``>= level`` is floor); binary input passes through."""
    if isinstance(pred, BevGrid):
        return pred
    arr = np.asarray(pred)
    if resolution is None:
        raise ValueError("resolution required for raw arrays")
    return BevGrid(arr >= level, resolution)


def clamp_evidence(pred: BevGrid, f_obs: BevGrid, u: BevGrid) -> BevGrid:
    return f_obs | (u & pred)


def nearest_observed_labels(observed: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Label of the nearest observed cell for every cell of the grid.

    Distance is Euclidean between cell centres; ties go to the observed cell
    that comes first in row-major order.  Exact two-pass separable search:
    nearest observed row per column, then the best column under the key
    ``(d^2, row, col)``.
    """
    observed = np.asarray(observed, dtype=bool)
    if not observed.any():
        raise NoEvidenceError("no evidence: observed region is empty")
    h, w = observed.shape
    rows = np.arange(h)[:, None]
    big = np.int64(4 * (h + w))
    above = np.maximum.accumulate(np.where(observed, rows, -big), axis=0)
    below = np.minimum.accumulate(np.where(observed, rows, big)[::-1], axis=0)[::-1]
    take_above = (rows - above) <= (below - rows)
    nearest_row = np.where(take_above, above, below)
    has = observed.any(axis=0)[None, :]
    dy2 = np.where(has, (rows - nearest_row) ** 2, -1).astype(np.int64)
    nearest_row = np.where(has, nearest_row, 0)

    out = np.empty((h, w), dtype=bool)
    _kernels.nearest_column_pass(nearest_row.astype(np.int64), dy2, np.ascontiguousarray(labels, dtype=bool), out)
    return out


def _raw_prediction(method: str, f_obs: BevGrid, u: BevGrid, v: BevGrid, obs_id: str, seed: int, k: int) -> BevGrid:
    res = f_obs.resolution
    if method == "all_obstacle":
        return BevGrid.zeros(*f_obs.shape, res)
    if method == "all_floor":
        return BevGrid.ones(*f_obs.shape, res)
    if method == "nn_prop":
        observed = v.cells & ~u.cells
        return BevGrid(nearest_observed_labels(observed, f_obs.cells), res)
    if method == "uniform_random":
        return BevGrid(CounterRng("uniform_random", seed, obs_id, k).bits(f_obs.shape), res)
    raise UnknownMethodError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def complete(method: str, rec, k: int = 1, seed: int = 0) -> SampleSet:
    """Run a built-in completer on an observation record and clamp each sample."""
    if method not in METHODS:
        raise UnknownMethodError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if k < 1:
        raise ValueError("k must be at least 1")
    draws = k if method == "uniform_random" else 1
    samples = []
    for i in range(draws):
        raw = _raw_prediction(method, rec.f_obs, rec.u, rec.v, rec.obs_id, seed, i)
        samples.append(clamp_evidence(threshold(raw), rec.f_obs, rec.u))
    if draws == 1:
        samples = samples * k
    return SampleSet(rec.obs_id, tuple(samples), method)


def evidence_violations(samples: SampleSet, rec) -> int:
    """Count observed cells on which any sample disagrees with ``f_obs``."""
    observed = rec.v.cells & ~rec.u.cells
    wrong = (samples.stack() != rec.f_obs.cells[None]) & observed[None]
    return int(wrong.any(axis=0).sum())


# --------------------------------------------------------------------------- prediction files

def prediction_path(directory: str | Path, obs_id: str, k: int) -> Path:
    return Path(directory) / f"{obs_id}_s{k}.png"


def write_sample_set(samples: SampleSet, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples.samples):
        p = prediction_path(directory, samples.obs_id, i)
        write_png(s, p)
        paths.append(p)
    return paths


def index_predictions(directory: str | Path) -> dict[str, list[Path]]:
    """Map obs_id to its prediction files ordered by sample index."""
    found: dict[str, list[tuple[int, Path]]] = {}
    for p in Path(directory).iterdir():
        m = _PRED_NAME.match(p.name)
        if m:
            found.setdefault(m["obs"], []).append((int(m["k"]), p))
    return {obs: [p for _, p in sorted(items)] for obs, items in found.items()}


def load_sample_set(paths: list[Path], rec, method_tag: str) -> SampleSet:
    """Read prediction PNGs, threshold at 128/255 and clamp to the record's evidence."""
    if not paths:
        raise MissingPredictionError(f"no predictions for {rec.obs_id}")
    samples = []
    for p in paths:
        pred = read_png(p, rec.f_obs.resolution)
        if pred.shape != rec.f_obs.shape:
            raise GridCompositionError(f"{p.name}: prediction shape {pred.shape} != observation {rec.f_obs.shape}")
        samples.append(clamp_evidence(pred, rec.f_obs, rec.u))
    return SampleSet(rec.obs_id, tuple(samples), method_tag)
