"""Multi-solution instances assembled from compatible observation records.

Shared evidence is the intersection of the inputs' observed floor; cells
that every input observed but labelled differently are promoted to the
unobserved set so that each input's ground truth is a valid completion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import reduce
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import BevGrid, read_png, write_png
from .metrics import fidelity


class UninformativeInstanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MultiSolutionInstance:
    f_obs_syn: BevGrid
    v_syn: BevGrid
    u_syn: BevGrid
    eval_syn: BevGrid
    solutions: tuple[BevGrid, ...]
    provenance: tuple[str, ...]
    promoted_count: int

    @property
    def observed(self) -> BevGrid:
        return self.v_syn.andnot(self.u_syn)

    def is_multimodal(self) -> bool:
        """True when at least one pair of solutions differs on the evaluation region."""
        m = self.eval_syn.cells
        return any(not np.array_equal(a.cells & m, b.cells & m) for a, b in combinations(self.solutions, 2))

    def pairwise_iou(self) -> np.ndarray:
        n = len(self.solutions)
        out = np.ones((n, n))
        for i, j in combinations(range(n), 2):
            out[i, j] = out[j, i] = fidelity(self.solutions[i], self.solutions[j], self.eval_syn).iou
        return out

    def consistency_violations(self) -> int:
        """Observed valid cells where some solution disagrees with the shared evidence."""
        obs = self.observed.cells
        bad = np.zeros_like(obs)
        for g in self.solutions:
            bad |= (g.cells != self.f_obs_syn.cells) & obs
        return int(bad.sum())


def build_instance(records: Sequence) -> MultiSolutionInstance:
    if len(records) < 2:
        raise ValueError("a multi-solution instance needs at least two records")
    first = records[0].f_obs
    for r in records:
        for g in (r.f_obs, r.u, r.f_star, r.v):
            first.check_compatible(g)
    f_obs_syn = reduce(lambda a, b: a & b, (r.f_obs for r in records))
    if not f_obs_syn.any():
        raise UninformativeInstanceError("no observed floor shared by all records")
    v_syn = reduce(lambda a, b: a & b, (r.v for r in records))
    mutually_observed = reduce(lambda a, b: a & b, (r.v.andnot(r.u) for r in records))
    labels = np.stack([r.f_star.cells for r in records])
    conflict = labels.any(axis=0) & ~labels.all(axis=0)
    delta = BevGrid(mutually_observed.cells & conflict, first.resolution)
    u_syn = reduce(lambda a, b: a | b, (r.u for r in records)) | delta
    return MultiSolutionInstance(
        f_obs_syn=f_obs_syn,
        v_syn=v_syn,
        u_syn=u_syn,
        eval_syn=u_syn & v_syn,
        solutions=tuple(r.f_star & v_syn for r in records),
        provenance=tuple(r.obs_id for r in records),
        promoted_count=delta.count(),
    )


def write_instance(inst: MultiSolutionInstance, directory: str | Path, instance_id: str = "instance") -> None:
    """Observation-style directory plus ``solutions/sol_{j}.png``."""
    directory = Path(directory)
    (directory / "solutions").mkdir(parents=True, exist_ok=True)
    write_png(inst.f_obs_syn, directory / "f_obs.png")
    write_png(inst.u_syn, directory / "u.png")
    write_png(inst.v_syn, directory / "v.png")
    for j, g in enumerate(inst.solutions):
        write_png(g, directory / "solutions" / f"sol_{j}.png")
    meta = {
        "obs_id": instance_id,
        "provenance": list(inst.provenance),
        "promoted_count": inst.promoted_count,
        "solution_count": len(inst.solutions),
        "multimodal": inst.is_multimodal(),
        "resolution": inst.f_obs_syn.resolution,
        "shape": list(inst.f_obs_syn.shape),
    }
    (directory / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")


def read_instance(directory: str | Path) -> MultiSolutionInstance:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    res = float(meta["resolution"])
    f_obs = read_png(directory / "f_obs.png", res)
    u = read_png(directory / "u.png", res)
    v = read_png(directory / "v.png", res)
    sols = tuple(read_png(directory / "solutions" / f"sol_{j}.png", res) for j in range(meta["solution_count"]))
    return MultiSolutionInstance(f_obs, v, u, u & v, sols, tuple(meta["provenance"]), int(meta["promoted_count"]))
