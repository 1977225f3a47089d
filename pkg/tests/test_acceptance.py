"""The ten acceptance criteria at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL`` line (visible under ``-v``
as well as ``-s``) before asserting.
"""

import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from floorbench import baselines, cli
from floorbench.curation import (
    SplitWarning,
    ManifestEntry,
    filter_and_tier,
    largest_remainder,
    scene_tier_counts,
    split_scenes,
    tier_proportions,
)
from floorbench.grid import BevGrid
from floorbench.metrics import (
    best_of_k_curve,
    boundary_partition,
    confusion,
    distributional_eval,
    energy_score,
    fidelity,
    variance_decomposition,
)
from floorbench.multisolution import build_instance
from floorbench.procgen import LayoutSpec, build_layout, generate, random_spec, single_room_spec
from floorbench.scene import SceneGeometry
from floorbench.synthesis import (
    ObservationRejected,
    UnusableSceneError,
    line_of_sight,
    propose_poses,
    rasterize_observation,
    synthesize_scene,
    visible_floor,
)
from oracles import chebyshev_partition, fine_visible_floor

CORPUS_SCENES = 200
CORPUS_RECORDS = 1000
OBS_PER_SCENE = 5


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def scene_tag(i):
    return "ood" if i % 20 == 19 else ("pa", "pb")[i % 2]


@pytest.fixture(scope="module")
def corpus():
    """About 200 procedural scenes, five observations each."""
    scenes, recs = {}, []
    i = 0
    while len(scenes) < CORPUS_SCENES or len(recs) < CORPUS_RECORDS:
        sid = f"pg{i:04d}"
        scene = generate(random_spec(i, seed=11), scene_id=sid, source_tag=scene_tag(i))
        i += 1
        try:
            out = synthesize_scene(scene, budget=OBS_PER_SCENE, seed=i)
        except UnusableSceneError:
            continue
        scenes[sid] = scene.source_tag
        recs.extend(out.records)
    return scenes, recs


@pytest.fixture(scope="module")
def records(corpus):
    return corpus[1][:CORPUS_RECORDS]


# --------------------------------------------------------------------------- 1

def test_c1_metric_identities(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(2, 17, 2)
        truth = BevGrid(rng.random((h, w)) < rng.random(), 0.04)
        pred = BevGrid(rng.random((h, w)) < rng.random(), 0.04)
        mask = BevGrid(rng.random((h, w)) < 0.7, 0.04)
        if not mask.any():
            mask = BevGrid.ones(h, w, 0.04)
        fid = fidelity(pred, truth, mask)
        tp, fp, fn, tn = confusion(pred.cells, truth.cells, mask.cells)
        accuracy = (tp + tn) / mask.count()
        worst = max(worst, abs(fid.umr - (1 - accuracy)), abs(fid.f1 - 2 * fid.iou / (1 + fid.iou)))
        if tp + fp + fn:
            k = int(rng.integers(1, 9))
            worst = max(worst, abs(energy_score([pred] * k, truth, mask) - (1 - fid.iou)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10
    report(1, ok, f"max identity error {worst:.1e}, {elapsed:.2f} s (limit 10 s)")
    assert ok


# --------------------------------------------------------------------------- 2

def test_c2_baseline_relations(records, report):
    start = time.perf_counter()
    bad = 0
    for rec in records:
        mask = rec.u & rec.v
        obstacle = baselines.complete("all_obstacle", rec).samples[0]
        floor = baselines.complete("all_floor", rec).samples[0]
        n = mask.count()
        prevalence = (rec.f_star & mask).count() / n
        bad += fidelity(obstacle, rec.f_star, mask).iou != 0.0
        bad += fidelity(floor, rec.f_star, mask).umr != (n - (rec.f_star & mask).count()) / n
        bad += not math.isclose(fidelity(floor, rec.f_star, mask).umr, 1 - prevalence, abs_tol=1e-15)
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 5 and len(records) == CORPUS_RECORDS
    report(2, ok, f"{bad} violations on {len(records)} records, {elapsed:.2f} s (limit 5 s)")
    assert ok


# --------------------------------------------------------------------------- 3

def test_c3_evidence_clamping(records, report):
    bad = 0
    for rec in records:
        for method in baselines.METHODS:
            bad += baselines.evidence_violations(baselines.complete(method, rec, k=2, seed=3), rec)
    ok = bad == 0
    report(3, ok, f"{bad} disagreeing observed cells over {len(records)} records x {len(baselines.METHODS)} methods")
    assert ok


# --------------------------------------------------------------------------- 4

def test_c4_visibility_oracle(report):
    start = time.perf_counter()
    agree = total = 0
    per_scene = []
    # default seed; the margin over 99.9% is thin and varies by seed (see the decisions ledger)
    for i in range(50):
        scene = generate(random_spec(i, seed=0))
        pose = propose_poses(scene, seed=i)[0]
        vis = visible_floor(scene, pose).cells
        fine, targets = fine_visible_floor(scene, pose.x, pose.y, pose.yaw)
        if not targets.any():
            continue
        same = int(np.count_nonzero(vis[targets] == fine[targets]))
        agree += same
        total += int(targets.sum())
        per_scene.append(same / targets.sum())

    rng = np.random.default_rng(8)
    violations = trials = 0
    while trials < 200:
        scene = generate(random_spec(int(rng.integers(1000)), seed=5))
        labels, n = ndimage.label(scene.obstacle_height > 0)
        if n == 0:
            continue
        drop = labels == rng.integers(1, n + 1)
        heights = np.where(drop, 0.0, scene.obstacle_height).astype(np.float32)
        cleared = SceneGeometry(BevGrid(scene.floor_mask.cells | drop, scene.resolution), heights,
                                scene.floor_z, scene.origin)
        pose = propose_poses(scene, seed=trials)[int(rng.integers(20))]
        floor, _, before = line_of_sight(scene, pose)
        _, _, after = line_of_sight(cleared, pose)
        violations += int(np.count_nonzero(floor & before & ~after))
        trials += 1
    elapsed = time.perf_counter() - start
    rate = agree / total
    ok = rate >= 0.999 and violations == 0 and elapsed < 120
    report(4, ok, f"agreement {rate:.5f} over {total} cells (worst scene {min(per_scene):.4f}), "
                  f"{violations} monotonicity violations in {trials} deletions, {elapsed:.1f} s (limit 120 s)")
    assert ok


# --------------------------------------------------------------------------- 5

PIPELINE = """
[run]
seed = 21
observations_per_scene = 3
k = 4
ood_sources = ood

[procgen]
count = 8
source_tags = pa, pb, pa, pb, pa, pb, pa, ood
"""


def run_pipeline(cfg: Path, out: Path, workers: int):
    codes = [cli.main(["synthesize", "-c", str(cfg), "-o", str(out), "--workers", str(workers)]),
             cli.main(["curate", "-c", str(cfg), "-o", str(out)])]
    for method in baselines.METHODS:
        codes.append(cli.main(["complete", "-c", str(cfg), "-o", str(out), "--method", method]))
        codes.append(cli.main(["evaluate", "-c", str(cfg), "-o", str(out), "--method", method]))
    return codes


def test_c5_pipeline_determinism(tmp_path, report):
    cfg = tmp_path / "run.ini"
    cfg.write_text(PIPELINE)
    codes = run_pipeline(cfg, tmp_path / "a", 1) + run_pipeline(cfg, tmp_path / "b", 2)
    compared = differing = 0
    for pattern in ("*.jsonl", "predictions/*/*.png", "metrics/*.csv"):
        a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").glob(pattern))
        b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").glob(pattern))
        differing += a != b
        for rel in a:
            compared += 1
            differing += (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()
    ok = set(codes) == {0} and differing == 0 and compared > 0
    report(5, ok, f"{compared} files compared, {differing} differ, exit codes {sorted(set(codes))}")
    assert ok


# --------------------------------------------------------------------------- 6

def test_c6_best_of_k_monotone(records, report):
    bad = 0
    for rec in records[:500]:
        curve = best_of_k_curve(baselines.complete("uniform_random", rec, k=4, seed=6), rec.f_star, rec.u & rec.v)
        bad += any(b < a for a, b in zip(curve, curve[1:]))
    ok = bad == 0
    report(6, ok, f"{bad} of 500 records with a decreasing best-of-K prefix")
    assert ok


# --------------------------------------------------------------------------- 7

def synthetic_gt(rng, size=40):
    f = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 5)):
        r0, c0 = rng.integers(0, size - 8, 2)
        h, w = rng.integers(6, size // 2, 2)
        f[r0:r0 + h, c0:c0 + w] = True
    f &= ~(rng.random((size, size)) < 0.02)
    return f


def test_c7_boundary_decomposition(report):
    rng = np.random.default_rng(77)
    mismatched = 0
    for _ in range(100):
        f = synthetic_gt(rng)
        u = rng.random(f.shape) < 0.6
        interior, boundary = boundary_partition(BevGrid(f, 0.04), BevGrid(u, 0.04), 7)
        oi, ob = chebyshev_partition(f, u, 7)
        mismatched += not (np.array_equal(interior.cells, oi) and np.array_equal(boundary.cells, ob))

    # a 160x160 room with a pillar; samples flip only boundary cells
    f = np.zeros((160, 160), bool)
    f[10:150, 10:150] = True
    f[70:90, 70:90] = False
    truth, u = BevGrid(f, 0.04), BevGrid.ones(160, 160, 0.04)
    shares, interior_vars = [], []
    for r in range(5, 10):
        interior, boundary = boundary_partition(truth, u, r)
        shares.append(boundary.count() / (boundary.count() + interior.count()))
        samples = [truth.cells ^ (boundary.cells & (rng.random(f.shape) < 0.3)) for _ in range(4)]
        vi, vb = variance_decomposition(samples, interior, boundary)
        interior_vars.append(vi)
    steps = np.diff(shares)
    smooth = bool(np.all(steps > 0) and steps.max() <= 2 * steps.min())
    ok = mismatched == 0 and smooth and all(v == 0.0 for v in interior_vars)
    report(7, ok, f"{mismatched}/100 oracle mismatches, boundary share r=5..9 "
                  f"{', '.join(f'{s:.3f}' for s in shares)}, var_interior {max(interior_vars)}")
    assert ok


# --------------------------------------------------------------------------- 8

def test_c8_multisolution_consistency(report):
    instances = violations = bad_eval = multimodal = 0
    layout = 0
    while instances < 20:
        layout += 1
        base = LayoutSpec(seed=layout, room_count=2, room_size=(3.0, 4.5), furniture_count=(2, 4))
        scenes = [build_layout(LayoutSpec(**{**base.__dict__, "furniture_seed": j})).to_scene() for j in range(3)]
        recs = None
        for pose in propose_poses(scenes[0], seed=layout)[:40]:
            try:
                recs = [rasterize_observation(s, pose, obs_id=f"l{layout}v{j}") for j, s in enumerate(scenes)]
                inst = build_instance(recs)
                break
            except (ObservationRejected, ValueError):
                recs = None
        if recs is None:
            continue
        instances += 1
        violations += inst.consistency_violations()
        for g in inst.solutions:
            violations += int(np.count_nonzero((g.cells != inst.f_obs_syn.cells) & inst.observed.cells))
        d = distributional_eval(inst.solutions, inst.solutions, inst.eval_syn)
        bad_eval += d.d_sym != 0.0 or d.coverage != 1.0
        multimodal += inst.is_multimodal()
    ok = violations == 0 and bad_eval == 0
    report(8, ok, f"{instances} instances ({multimodal} multimodal), {violations} consistency violations, "
                  f"{bad_eval} with d_sym != 0 or coverage != 1")
    assert ok


# --------------------------------------------------------------------------- 9

def test_c9_split_hygiene(corpus, report):
    scenes, recs = corpus
    entries = [ManifestEntry(r.obs_id, r.scene_id, r.source_tag, r.r_cond) for r in recs]
    kept, _ = filter_and_tier(entries)
    kept_scenes = {e.scene_id: e.source_tag for e in kept}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SplitWarning)
        assign = split_scenes(kept_scenes, seed=9, ood_sources=["ood"], balance=scene_tier_counts(kept))
    for e in kept:
        e.split, e.distribution = assign[e.scene_id]

    problems = []
    per_scene = {}
    for e in kept:
        per_scene.setdefault(e.scene_id, set()).add(e.split)
    if any(len(s) > 1 for s in per_scene.values()):
        problems.append("scene spans splits")
    if any(e.split != "test" for e in kept if e.source_tag == "ood"):
        problems.append("OOD outside test")
    for tag in ("pa", "pb"):
        members = [s for s, t in kept_scenes.items() if t == tag]
        got = [sum(assign[s][0] == sp for s in members) for sp in ("train", "val", "test")]
        if got != largest_remainder(len(members), (0.8, 0.1, 0.1)):
            problems.append(f"stratum {tag} split {got}")
    # test holds the OOD scenes too, so shares are taken over every kept observation
    props = tier_proportions(kept)
    worst = max(abs(props[sp][t] - props["all"][t]) for sp in ("train", "val", "test") for t in props["all"])
    if worst >= 0.02:
        problems.append(f"tier share off by {worst:.4f}")
    ok = not problems and len(kept_scenes) >= CORPUS_SCENES * 0.9
    report(9, ok, f"{len(kept_scenes)} scenes, {len(kept)} observations, worst tier-share gap {worst * 100:.2f} pp"
                  + (f"; {'; '.join(problems)}" if problems else ""))
    assert ok


# --------------------------------------------------------------------------- 10

def test_c10_throughput(report):
    scene = build_layout(single_room_spec(10.0, seed=0, furniture=(2, 4))).to_scene("room")
    synthesize_scene(scene, budget=2, seed=0)  # compile and warm caches

    def timed(**kw):
        start = time.perf_counter()
        out = synthesize_scene(scene, budget=24, seed=0, **kw)
        return time.perf_counter() - start, out

    single, ref = timed(workers=1)
    parallel, par = timed(workers=8)
    _, chunked = timed(workers=3, chunk_size=1000)
    invariant = len(ref.records) == 24 and all(
        all(a.channels()[c] == b.channels()[c] and a.channels()[c] == d.channels()[c] for c in a.channels())
        for a, b, d in zip(ref.records, par.records, chunked.records))
    invariant = invariant and len(par.records) == len(chunked.records) == 24
    ok = single < 10 and parallel < 2 and invariant
    report(10, ok, f"24 observations in {single:.2f} s single-threaded (limit 10 s), {parallel:.2f} s with 8 workers "
                   f"(limit 2 s), invariant across workers/chunks: {invariant}")
    assert ok
