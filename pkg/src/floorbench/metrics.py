"""Masked scoring: fidelity, energy score, sample statistics, variance split,
distributional metrics against a solution set, and aggregation.

Floor is the positive class everywhere.  All scores are restricted to an
evaluation mask (unobserved and valid cells).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .baselines import SampleSet
from .grid import BevGrid, dilate, erode, eval_region

DEFAULT_RADIUS = 7
MATCH_THRESHOLD = 0.1


class DegenerateRecordError(ValueError):
    """The evaluation mask is empty; the record cannot be scored."""


class Fidelity(NamedTuple):
    umr: float
    iou: float
    f1: float


class SampleStats(NamedTuple):
    iou_best: float
    iou_mean: float
    var_mean: float


class Distributional(NamedTuple):
    d_pg: float
    d_gp: float
    d_sym: float
    coverage: float
    diversity: float | None


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _as_stack(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.stack()
    if isinstance(samples, BevGrid):
        return samples.cells[None]
    return np.stack([s.cells if isinstance(s, BevGrid) else np.asarray(s, dtype=bool) for s in samples])


def _check(mask: BevGrid, *grids: BevGrid) -> None:
    for g in grids:
        mask.check_compatible(g)


def confusion(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) counts of ``pred`` against ``truth`` inside ``mask``."""
    p = pred & mask
    t = truth & mask
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~pred & t))
    tn = int(np.count_nonzero(mask)) - tp - fp - fn
    return tp, fp, fn, tn


def _fidelity_counts(tp: int, fp: int, fn: int, n: int) -> Fidelity:
    return Fidelity(_ratio(fp + fn, n), _ratio(tp, tp + fp + fn), _ratio(2 * tp, 2 * tp + fp + fn))


def fidelity(completion: BevGrid, f_star: BevGrid, eval_mask: BevGrid) -> Fidelity:
    """UMR, IoU and F1 inside ``eval_mask``; empty unions score 0."""
    _check(eval_mask, completion, f_star)
    n = eval_mask.count()
    if n == 0:
        raise DegenerateRecordError("empty evaluation mask")
    tp, fp, fn, _ = confusion(completion.cells, f_star.cells, eval_mask.cells)
    return _fidelity_counts(tp, fp, fn, n)


def _per_sample_iou(stack: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = stack & mask
    t = truth & mask
    inter = np.count_nonzero(s & t, axis=(1, 2))
    union = np.count_nonzero(s | t, axis=(1, 2))
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _pairwise_jaccard(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Jaccard distance matrix between two stacks; two empty sets are at 0."""
    fa = (a & mask).reshape(len(a), -1).astype(np.int64)
    fb = (b & mask).reshape(len(b), -1).astype(np.int64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 0.0)


def energy_score(samples, f_star: BevGrid, eval_mask: BevGrid) -> float:
    """Masked energy score: mean distance to truth minus half the mean pairwise spread."""
    stack = _as_stack(samples)
    if eval_mask.count() == 0:
        raise DegenerateRecordError("empty evaluation mask")
    m = eval_mask.cells
    k = len(stack)
    to_truth = _pairwise_jaccard(stack, f_star.cells[None], m)[:, 0]
    first = math.fsum(to_truth) / k
    if k == 1:
        return first
    pair = _pairwise_jaccard(stack, stack, m)
    return first - math.fsum(pair.ravel()) / (2 * k * (k - 1))


def per_pixel_variance(stack: np.ndarray) -> np.ndarray:
    """Population variance of the K binary values at each cell: p (1 - p)."""
    p = stack.mean(axis=0)
    return p * (1.0 - p)


def sample_stats(samples, f_star: BevGrid, eval_mask: BevGrid) -> SampleStats:
    stack = _as_stack(samples)
    m = eval_mask.cells
    n = int(np.count_nonzero(m))
    if n == 0:
        raise DegenerateRecordError("empty evaluation mask")
    ious = _per_sample_iou(stack, f_star.cells, m)
    var = per_pixel_variance(stack)
    return SampleStats(float(ious.max()), math.fsum(ious) / len(ious), math.fsum(var[m]) / n)


def best_of_k_curve(samples, f_star: BevGrid, eval_mask: BevGrid) -> list[float]:
    """Best-of-prefix IoU for prefixes of length 1..K."""
    ious = _per_sample_iou(_as_stack(samples), f_star.cells, eval_mask.cells)
    return [float(x) for x in np.maximum.accumulate(ious)]


def boundary_partition(f_star: BevGrid, u: BevGrid, radius: int = DEFAULT_RADIUS) -> tuple[BevGrid, BevGrid]:
    """Split unobserved cells into (interior, boundary) around the floor edge.

    The edge is the one-cell inner rim of the floor; boundary cells lie within
    ``radius`` (Chebyshev) of it, interior cells are floor surviving erosion
    by the same square kernel.
    """
    if radius < 1:
        raise ValueError("radius must be at least 1")
    f_star.check_compatible(u)
    edge = f_star.andnot(erode(f_star, 1))
    boundary = dilate(edge, radius) & u
    interior = (erode(f_star, radius) & u).andnot(boundary)
    return interior, boundary


def variance_decomposition(samples, interior: BevGrid, boundary: BevGrid) -> tuple[float | None, float | None]:
    """Mean per-pixel variance over each mask; ``None`` for an empty mask."""
    if (interior & boundary).any():
        raise ValueError("interior and boundary masks overlap")
    var = per_pixel_variance(_as_stack(samples))

    def mean_over(mask: BevGrid):
        n = mask.count()
        return math.fsum(var[mask.cells]) / n if n else None

    return mean_over(interior), mean_over(boundary)


def distributional_eval(predictions, solutions: Sequence[BevGrid], eval_mask: BevGrid,
                        match_threshold: float = MATCH_THRESHOLD) -> Distributional:
    """Chamfer-style distances between a prediction set and a solution set."""
    preds = _as_stack(predictions)
    if len(preds) == 0 or len(solutions) == 0:
        raise ValueError("distributional_eval needs at least one prediction and one solution")
    sols = _as_stack(solutions)
    m = eval_mask.cells
    dist = _pairwise_jaccard(preds, sols, m)  # [pred, solution]
    d_pg = math.fsum(dist.min(axis=1)) / len(preds)
    d_gp = math.fsum(dist.min(axis=0)) / len(sols)
    coverage = float(np.count_nonzero(dist.min(axis=0) < match_threshold)) / len(sols)
    diversity = None
    if len(preds) > 1:
        k = len(preds)
        diversity = math.fsum(_pairwise_jaccard(preds, preds, m).ravel()) / (k * (k - 1))
    return Distributional(d_pg, d_gp, 0.5 * (d_pg + d_gp), coverage, diversity)


# --------------------------------------------------------------------------- per-record scoring

@dataclass
class MetricsRecord:
    obs_id: str
    method_tag: str
    k: int
    umr: float
    iou: float
    f1: float
    iou_best: float
    iou_mean: float
    mes: float
    var_mean: float
    var_interior: float | None
    var_boundary: float | None
    tier: str = ""
    split: str = ""
    distribution: str = ""
    hard: bool = False
    error: str = ""


METRIC_FIELDS = ("umr", "iou", "f1", "iou_best", "iou_mean", "mes", "var_mean", "var_interior", "var_boundary")


def score_record(rec, samples: SampleSet, radius: int = DEFAULT_RADIUS, **labels) -> MetricsRecord:
    """Score a clamped sample set against an observation's ground truth.

    Fidelity is averaged over the K samples; for a deterministic method the
    samples are identical so this is the single-map score.
    """
    mask = eval_region(rec.u, rec.v)
    if mask.count() == 0:
        raise DegenerateRecordError(f"{rec.obs_id}: empty evaluation mask")
    stack = samples.stack()
    m = mask.cells
    n = int(np.count_nonzero(m))
    per = [_fidelity_counts(*confusion(s, rec.f_star.cells, m)[:3], n) for s in stack]
    umr, iou, f1 = (math.fsum(x) / len(per) for x in zip(*per))
    stats = sample_stats(stack, rec.f_star, mask)
    interior, boundary = boundary_partition(rec.f_star, rec.u, radius)
    vi, vb = variance_decomposition(stack, interior, boundary)
    return MetricsRecord(
        obs_id=rec.obs_id, method_tag=samples.method_tag, k=samples.k,
        umr=umr, iou=iou, f1=f1, iou_best=stats.iou_best, iou_mean=stats.iou_mean,
        mes=energy_score(stack, rec.f_star, mask), var_mean=stats.var_mean,
        var_interior=vi, var_boundary=vb, **labels,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


CSV_FIELDS = tuple(f.name for f in fields(MetricsRecord))


def metrics_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sorted(records, key=lambda r: (r.method_tag, r.obs_id)):
        w.writerow([_fmt(v) for v in asdict(r).values()])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricsRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for f in fields(MetricsRecord):
            raw = row[f.name]
            if f.name in METRIC_FIELDS:
                kw[f.name] = float(raw) if raw != "" else None
            elif f.name == "k":
                kw[f.name] = int(raw)
            elif f.name == "hard":
                kw[f.name] = raw == "1"
            else:
                kw[f.name] = raw
        out.append(MetricsRecord(**kw))
    return out


# --------------------------------------------------------------------------- aggregation

@dataclass
class AggregateRow:
    group: tuple[str, ...]
    n: int
    mean: dict[str, float | None]
    std: dict[str, float | None]


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def aggregate(records: Iterable[MetricsRecord], keys: Sequence[str]) -> list[AggregateRow]:
    """Mean and population std of every metric per group, in sorted order.

    Records carrying an error are skipped; an undefined value (empty mask for
    a variance term) is left out of that metric only.
    """
    groups: dict[tuple, list[MetricsRecord]] = defaultdict(list)
    for r in sorted(records, key=lambda r: r.obs_id):
        if r.error:
            continue
        groups[tuple(str(getattr(r, k)) for k in keys)].append(r)
    rows = []
    for g in sorted(groups):
        members = groups[g]
        mean, std = {}, {}
        for f in METRIC_FIELDS:
            mean[f], std[f] = _mean_std([getattr(r, f) for r in members if getattr(r, f) is not None])
        rows.append(AggregateRow(g, len(members), mean, std))
    return rows
