"""Record validation, conditioning filter, difficulty tiers, scene-level splits."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .grid import eval_region
from .rng import CounterRng

DEFAULT_TAU = 0.10
EASY_ABOVE = 0.20
NEGLIGIBLE_BELOW = 0.02
HARD_MAX_RCOND = 0.20
HARD_MAX_PREVALENCE = 0.50
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
SPLITS = ("train", "val", "test")
TIERS = ("Easy", "Learnable", "Negligible")
MIN_STRATUM = 3


class SplitWarning(UserWarning):
    pass


CHECKS = (
    "mask consistency",
    "evidence consistency",
    "evidence disjointness",
    "validity containment",
    "support validity",
    "non-degeneracy",
)


def validate(rec) -> list[str]:
    """Names of every failed check; an empty list means the record passes."""
    grids = [rec.f_obs, rec.u, rec.f_star, rec.v]
    if any(g.shape != grids[0].shape or g.resolution != grids[0].resolution for g in grids):
        return ["mask consistency"]
    failed = []
    if not rec.f_obs.issubset(rec.f_star):
        failed.append("evidence consistency")
    if (rec.f_obs & rec.u).any():
        failed.append("evidence disjointness")
    if not (rec.f_obs | rec.u).issubset(rec.v):
        failed.append("validity containment")
    if not eval_region(rec.u, rec.v).any():
        failed.append("support validity")
    if not rec.f_star.any():
        failed.append("non-degeneracy")
    return failed


def floor_prevalence(rec) -> float | None:
    mask = eval_region(rec.u, rec.v)
    n = mask.count()
    return (rec.f_star & mask).count() / n if n else None


def difficulty(r: float) -> float:
    return math.inf if r == 0 else (1.0 - r) / r


def tier_of(r: float) -> str:
    if r > EASY_ABOVE:
        return "Easy"
    if r >= NEGLIGIBLE_BELOW:
        return "Learnable"
    return "Negligible"


def is_hard(r: float, prevalence: float | None) -> bool:
    return prevalence is not None and r <= HARD_MAX_RCOND and prevalence < HARD_MAX_PREVALENCE


@dataclass
class ManifestEntry:
    obs_id: str
    scene_id: str
    source_tag: str
    r_cond: float | None
    floor_prevalence: float | None = None
    difficulty: float | None = None
    tier: str = ""
    split: str = ""
    distribution: str = ""
    hard: bool = False
    path: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return json.dumps(d, ensure_ascii=False, allow_nan=False)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ManifestEntry":
        names = {f.name for f in fields(cls)} - {"extra"}
        kw = {k: d.get(k) for k in names if k in d}
        return cls(**kw, extra={k: v for k, v in d.items() if k not in names})


def filter_and_tier(entries: Iterable[ManifestEntry], tau: float = DEFAULT_TAU):
    """Tier every entry, then drop those below ``tau``.

    Returns ``(kept, dropped)`` where ``dropped`` holds ``(entry, reason)``.
    Entries with undefined conditioning ratio are dropped untiered.
    """
    kept, dropped = [], []
    for e in entries:
        if e.r_cond is None:
            dropped.append((e, "r_cond undefined"))
            continue
        e.tier = tier_of(e.r_cond)
        d = difficulty(e.r_cond)
        e.difficulty = None if math.isinf(d) else d
        if e.r_cond < tau:
            dropped.append((e, "below tau"))
        else:
            kept.append(e)
    return kept, dropped


def hard_subset(entries: Iterable[ManifestEntry]) -> list[ManifestEntry]:
    return [e for e in entries if e.r_cond is not None and is_hard(e.r_cond, e.floor_prevalence)]


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n``; leftovers go to the largest remainders, earlier index first."""
    total = sum(fractions)
    quotas = [n * f / total for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _interleave(order: list[str], counts: Sequence[int]) -> dict[str, int]:
    """Spread split labels evenly along ``order`` (largest running deficit wins)."""
    n = len(order)
    given = [0] * len(counts)
    out = {}
    for pos, sid in enumerate(order, start=1):
        deficit = [counts[i] * pos / n - given[i] for i in range(len(counts))]
        i = max(range(len(counts)), key=lambda j: (deficit[j] if given[j] < counts[j] else -math.inf, -j))
        given[i] += 1
        out[sid] = i
    return out


def split_scenes(
    scenes: Mapping[str, str],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    ood_sources: Iterable[str] = (),
    balance: Mapping[str, Mapping[str, int]] | None = None,
) -> dict[str, tuple[str, str]]:
    """Assign each scene to ``(split, distribution)``.

    ``scenes`` maps scene_id to source_tag.  OOD sources go wholly to test.
    Every other source is a stratum split by largest-remainder rounding;
    strata smaller than three scenes go to train with a warning.  Within a
    stratum scenes are shuffled by the seed.  When ``balance`` supplies
    per-scene tier counts, scenes are first ordered by their Easy share and
    then swapped between splits (inside their stratum, so counts stay fixed)
    while that brings every split's tier shares closer to the corpus shares.
    """
    ood = set(ood_sources)
    strata: dict[str, list[str]] = defaultdict(list)
    out: dict[str, tuple[str, str]] = {}
    for sid in sorted(scenes):
        tag = scenes[sid]
        if tag in ood:
            out[sid] = ("test", "OOD")
        else:
            strata[tag].append(sid)
    share = None
    if balance is not None:
        share = {sid: c.get("Easy", 0) / max(1, sum(c.values())) for sid, c in balance.items()}
    for tag in sorted(strata):
        members = strata[tag]
        if len(members) < MIN_STRATUM:
            warnings.warn(f"stratum {tag!r} has {len(members)} scenes; assigned to train", SplitWarning, stacklevel=2)
            for sid in members:
                out[sid] = ("train", "ID")
            continue
        keys = CounterRng("split", seed, tag).raw(len(members))
        shuffled = [sid for _, sid in sorted(zip(keys.tolist(), members))]
        if share is not None:
            shuffled.sort(key=lambda sid: share.get(sid, 0.0))
        counts = largest_remainder(len(members), fractions)
        # rotate the sequence start by the seed so the first scene is not always train
        offset = int(CounterRng("split-offset", seed, tag).integers(1, len(members))[0])
        rotated = shuffled[offset:] + shuffled[:offset]
        for sid, i in _interleave(rotated, counts).items():
            out[sid] = (SPLITS[i], "ID")
    if balance is not None:
        _refine_tiers(out, scenes, ood, strata, balance)
    return out


def _refine_tiers(out, scenes, ood, strata, balance, max_rounds: int = 1000) -> None:
    """Greedy same-stratum swaps minimising the squared tier-share error of all splits."""
    ids = sorted(out)
    counts = np.array([[balance.get(s, {}).get(t, 0) for t in TIERS] for s in ids], dtype=float)
    total = counts.sum()
    if total == 0:
        return
    target = counts.sum(axis=0) / total
    split_of = np.array([SPLITS.index(out[s][0]) for s in ids])
    movable = np.array([scenes[s] not in ood and len(strata.get(scenes[s], ())) >= MIN_STRATUM for s in ids])
    stratum = np.array([scenes[s] for s in ids])
    sums = np.stack([counts[split_of == j].sum(axis=0) for j in range(len(SPLITS))])

    def error(t):
        n = t.sum(axis=-1, keepdims=True)
        dev = np.where(n > 0, t / np.maximum(n, 1) - target, 0.0)
        return (dev ** 2).sum(axis=-1)

    groups = {}
    for k in np.flatnonzero(movable):
        groups.setdefault((stratum[k], split_of[k]), []).append(k)
    for _ in range(max_rounds):
        best = (0.0, None)
        for i in range(len(SPLITS)):
            for j in range(i + 1, len(SPLITS)):
                base = error(sums[i]) + error(sums[j])
                for tag in sorted(strata):
                    a = groups.get((tag, i), [])
                    b = groups.get((tag, j), [])
                    if not a or not b:
                        continue
                    delta = counts[b][None, :, :] - counts[a][:, None, :]
                    gain = base - error(sums[i] + delta) - error(sums[j] - delta)
                    flat = int(np.argmax(gain))
                    if gain.flat[flat] > best[0] + 1e-15:
                        best = (float(gain.flat[flat]), (tag, i, j, flat // len(b), flat % len(b)))
        if best[1] is None:
            break
        tag, i, j, ai, bi = best[1]
        ka, kb = groups[(tag, i)][ai], groups[(tag, j)][bi]
        sums[i] += counts[kb] - counts[ka]
        sums[j] += counts[ka] - counts[kb]
        groups[(tag, i)][ai], groups[(tag, j)][bi] = kb, ka
        split_of[ka], split_of[kb] = j, i
    for k, sid in enumerate(ids):
        if movable[k]:
            out[sid] = (SPLITS[split_of[k]], "ID")


def scene_tier_counts(entries: Iterable[ManifestEntry]) -> dict[str, dict[str, int]]:
    """Per-scene tier counts, used to balance tiers across splits."""
    by: dict[str, Counter] = defaultdict(Counter)
    for e in entries:
        by[e.scene_id][e.tier] += 1
    return {s: dict(c) for s, c in by.items()}


def tier_proportions(entries: Iterable[ManifestEntry]) -> dict[str, dict[str, float]]:
    """Tier shares per split plus ``"all"``."""
    by: dict[str, Counter] = defaultdict(Counter)
    for e in entries:
        by[e.split][e.tier] += 1
        by["all"][e.tier] += 1
    return {s: {t: c[t] / sum(c.values()) for t in TIERS} for s, c in by.items()}


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    lines = [e.to_json() for e in sorted(entries, key=lambda e: e.obs_id)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{i}: malformed manifest line ({exc})") from exc
    return out
