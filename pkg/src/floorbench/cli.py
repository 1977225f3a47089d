"""Batch command-line interface.

Output tree under the configured output root::

    config.ini                         copy of the effective configuration
    observations/{scene}/{obs_id}/     f_obs.png u.png f_star.png v.png meta.json
    manifest.jsonl                     one line per accepted observation
    synthesis_summary.json             rejection funnel and scene status
    curated.jsonl, retention.json      curated corpus and per-stage retention
    curation_summary.csv               counts per split x distribution x tier
    predictions/{method}/              {obs_id}_s{k}.png, errors.csv
    metrics/{method}.csv               per-record scores (+ _prefix.csv, aggregates)
    report/                            merged tables and figures
    multisolution/{name}/              instance, solutions/sol_{j}.png
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from types import SimpleNamespace

from . import baselines, curation, metrics, multisolution, procgen, report, synthesis
from .config import ConfigError, RunConfig, load_config
from .grid import GridCompositionError, eval_region
from .rng import derive_key
from .scene import FloorExtractionError, MeshParseError, extract_floor, parse_mesh

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INVARIANT = 4

log = logging.getLogger("floorbench")


class InputError(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _map(cfg: RunConfig, fn, items):
    """Ordered map, threaded when more than one worker is configured."""
    items = list(items)
    if cfg.workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(cfg.workers) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------- synthesize

def enumerate_scenes(cfg: RunConfig) -> list[tuple[str, str, object]]:
    """(scene_id, source_tag, loader) for every configured scene, in a fixed order."""
    scenes = []
    for tag in sorted(cfg.sources):
        root = cfg.sources[tag]
        if root.is_dir():
            files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".ply", ".obj"))
        else:
            files = [root]
        for f in files:
            scenes.append((f"{tag}_{f.stem}", tag, f))
    for i in range(cfg.procgen_count):
        tag = cfg.procgen_tags[i % len(cfg.procgen_tags)]
        scenes.append((f"procgen_{i:04d}", tag, i))
    return scenes


def _load_scene(cfg: RunConfig, scene_id: str, tag: str, source):
    if isinstance(source, Path):
        mesh = parse_mesh(source, source_tag=tag, transform_table=cfg.transforms)
        geom = extract_floor(mesh, mode=cfg.floor_mode, scene_id=scene_id)
        return geom
    return procgen.generate(procgen.random_spec(source, cfg.seed), scene_id=scene_id, source_tag=tag)


def scene_seed(run_seed: int, scene_id: str) -> int:
    return derive_key("scene", run_seed, scene_id) >> 1


def cmd_synthesize(cfg: RunConfig) -> int:
    out = cfg.output
    scenes = enumerate_scenes(cfg)
    if not scenes:
        raise ConfigError("no scenes configured: add [sources] entries or a [procgen] count")
    out.mkdir(parents=True, exist_ok=True)

    def run(item):
        scene_id, tag, source = item
        try:
            geom = _load_scene(cfg, scene_id, tag, source)
        except (OSError, MeshParseError, FloorExtractionError, procgen.LayoutError) as exc:
            return scene_id, "unreadable", str(exc), None
        try:
            res = synthesis.synthesize_scene(geom, cfg.observations_per_scene, scene_seed(cfg.seed, scene_id))
        except synthesis.UnusableSceneError as exc:
            return scene_id, "unusable", str(exc), None
        return scene_id, "ok", "", res

    results = _map(cfg, run, scenes)
    entries = []
    funnel: Counter = Counter()
    status: dict[str, dict] = {}
    for (scene_id, tag, _), (_, state, detail, res) in zip(scenes, results):
        status[scene_id] = {"status": state, "source_tag": tag}
        if state != "ok":
            status[scene_id]["detail"] = detail
            log.warning("scene %s %s: %s", scene_id, state, detail)
            continue
        funnel["attempts"] += res.attempts
        funnel.update({f"rejected_{k}": v for k, v in res.rejections.items()})
        status[scene_id]["accepted"] = len(res.records)
        for rec in res.records:
            bad = rec.invariant_violations()
            if bad:
                raise InvariantViolation(f"{rec.obs_id}: {', '.join(bad)}")
            rel = Path("observations") / scene_id / rec.obs_id
            meta = synthesis.write_observation(rec, out / rel)
            entries.append(curation.ManifestEntry(
                obs_id=rec.obs_id, scene_id=scene_id, source_tag=rec.source_tag, r_cond=rec.r_cond,
                path=rel.as_posix(), extra={"pose": meta["pose"], "scene_seed": rec.seed, "run": cfg.recorded(),
                                            "thresholds": meta["thresholds"]},
            ))
    funnel["accepted"] = len(entries)
    states = Counter(s["status"] for s in status.values())
    summary = {
        "scenes": {"total": len(scenes), **{k: states.get(k, 0) for k in ("ok", "unusable", "unreadable")}},
        "funnel": dict(sorted(funnel.items())),
        "scene_status": status,
        "run": cfg.recorded(),
    }
    curation.write_manifest(entries, out / "manifest.jsonl")
    _write_text(out / "synthesis_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_text(out / "config.ini", cfg.to_ini())
    print(f"synthesized {len(entries)} observations from {states.get('ok', 0)}/{len(scenes)} scenes "
          f"({states.get('unusable', 0)} unusable, {states.get('unreadable', 0)} unreadable)")
    return EXIT_OK


# --------------------------------------------------------------------------- curate

def _load_record(cfg: RunConfig, entry: curation.ManifestEntry):
    d = cfg.output / entry.path
    try:
        return synthesis.read_observation(d)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{entry.obs_id}: cannot read observation at {d}: {exc}") from exc


def _read_manifest(path: Path) -> list[curation.ManifestEntry]:
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    try:
        return curation.read_manifest(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_curate(cfg: RunConfig, manifest: Path | None = None) -> int:
    out = cfg.output
    entries = _read_manifest(manifest or out / "manifest.jsonl")
    records = _map(cfg, lambda e: _load_record(cfg, e), entries)
    retention: Counter = Counter()
    valid = []
    for e, rec in zip(entries, records):
        failed = curation.validate(rec)
        if failed:
            retention["invalid"] += 1
            log.warning("%s failed validation: %s", e.obs_id, ", ".join(failed))
            continue
        e.floor_prevalence = curation.floor_prevalence(rec)
        valid.append(e)
    tiers_all = Counter(curation.tier_of(e.r_cond) for e in valid if e.r_cond is not None)
    kept, dropped = curation.filter_and_tier(valid, cfg.tau)
    for _, reason in dropped:
        retention["r_cond undefined" if reason == "r_cond undefined" else "below tau"] += 1
    retention["kept"] = len(kept)
    if retention["invalid"] + retention["r_cond undefined"] + retention["below tau"] + len(kept) != len(entries):
        raise InvariantViolation("retention counts do not sum to the input count")
    if not kept:
        log.warning("curated corpus is empty (tau = %s)", cfg.tau)
        print(f"warning: curated corpus is empty (tau = {cfg.tau})", file=sys.stderr)

    scenes = {e.scene_id: e.source_tag for e in kept}
    assignment = curation.split_scenes(scenes, cfg.fractions, cfg.seed, cfg.ood_sources,
                                       balance=curation.scene_tier_counts(kept))
    for e in kept:
        e.split, e.distribution = assignment[e.scene_id]
        e.hard = curation.is_hard(e.r_cond, e.floor_prevalence)
        e.extra["run"] = cfg.recorded()
        if e.distribution == "OOD" and e.split != "test":
            raise InvariantViolation(f"{e.obs_id}: OOD entry outside test")
    curation.write_manifest(kept, out / "curated.jsonl")

    by_cell = Counter((e.split, e.distribution, e.tier) for e in kept)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "distribution", "tier", "count", "hard"])
    hard = Counter((e.split, e.distribution, e.tier) for e in kept if e.hard)
    for key in sorted(by_cell):
        w.writerow([*key, by_cell[key], hard[key]])
    _write_text(out / "curation_summary.csv", buf.getvalue())
    stats = {
        "input": len(entries),
        "invalid": retention["invalid"],
        "r_cond_undefined": retention["r_cond undefined"],
        "below_tau": retention["below tau"],
        "kept": len(kept),
        "tau": cfg.tau,
        "tiers_before_filter": {t: tiers_all.get(t, 0) for t in curation.TIERS},
        "tiers_after_filter": {t: sum(1 for e in kept if e.tier == t) for t in curation.TIERS},
        "splits": {s: sum(1 for e in kept if e.split == s) for s in curation.SPLITS},
        "hard": sum(1 for e in kept if e.hard),
        "run": cfg.recorded(),
    }
    _write_text(out / "retention.json", json.dumps(stats, indent=2) + "\n")
    print(f"curated {len(kept)}/{len(entries)} observations "
          f"(invalid {stats['invalid']}, below tau {stats['below_tau']}, undefined {stats['r_cond_undefined']})")
    return EXIT_OK


# --------------------------------------------------------------------------- complete / evaluate

def _curated(cfg: RunConfig, manifest: Path | None) -> list[curation.ManifestEntry]:
    return _read_manifest(manifest or cfg.output / "curated.jsonl")


def cmd_complete(cfg: RunConfig, method: str, k: int | None = None, manifest: Path | None = None) -> int:
    if method not in baselines.METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(baselines.METHODS)}")
    k = k or cfg.k
    entries = _curated(cfg, manifest)
    pred_dir = cfg.output / "predictions" / method

    def run(e):
        rec = _load_record(cfg, e)
        try:
            ss = baselines.complete(method, rec, k, cfg.seed)
        except baselines.NoEvidenceError as exc:
            return e.obs_id, str(exc)
        if baselines.evidence_violations(ss, rec):
            raise InvariantViolation(f"{e.obs_id}: completion disagrees with observed evidence")
        baselines.write_sample_set(ss, pred_dir)
        return e.obs_id, ""

    pred_dir.mkdir(parents=True, exist_ok=True)
    results = _map(cfg, run, entries)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["obs_id", "error"])
    for obs_id, err in sorted(results):
        if err:
            w.writerow([obs_id, err])
    _write_text(pred_dir / "errors.csv", buf.getvalue())
    n_err = sum(1 for _, err in results if err)
    print(f"{method}: wrote {len(results) - n_err} sample sets of K={k} ({n_err} errors)")
    return EXIT_OK


def _prefix_text(curves: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    kmax = max((len(c) for c in curves.values()), default=0)
    w.writerow(["obs_id"] + [f"k{j + 1}" for j in range(kmax)])
    for obs_id in sorted(curves):
        w.writerow([obs_id] + [repr(x) for x in curves[obs_id]])
    return buf.getvalue()


def cmd_evaluate(cfg: RunConfig, method: str, predictions: Path | None = None, manifest: Path | None = None) -> int:
    entries = _curated(cfg, manifest)
    pred_dir = predictions or cfg.output / "predictions" / method
    if not pred_dir.is_dir():
        raise InputError(f"prediction directory not found: {pred_dir}")
    index = baselines.index_predictions(pred_dir)

    def run(e):
        rec = _load_record(cfg, e)
        labels = dict(tier=e.tier, split=e.split, distribution=e.distribution, hard=bool(e.hard))
        empty = dict(obs_id=e.obs_id, method_tag=method, k=0, umr=None, iou=None, f1=None, iou_best=None,
                     iou_mean=None, mes=None, var_mean=None, var_interior=None, var_boundary=None, **labels)
        paths = index.get(e.obs_id)
        if not paths:
            return metrics.MetricsRecord(**empty, error="missing prediction"), None
        try:
            ss = baselines.load_sample_set(paths, rec, method)
        except GridCompositionError as exc:
            raise InputError(str(exc)) from exc
        if baselines.evidence_violations(ss, rec):
            raise InvariantViolation(f"{e.obs_id}: clamped samples disagree with evidence")
        try:
            m = metrics.score_record(rec, ss, cfg.boundary_radius, **labels)
        except metrics.DegenerateRecordError:
            return metrics.MetricsRecord(**empty, error="degenerate evaluation mask"), None
        mask = eval_region(rec.u, rec.v)
        return m, metrics.best_of_k_curve(ss, rec.f_star, mask)

    results = _map(cfg, run, entries)
    rows = [r for r, _ in results]
    curves = {r.obs_id: c for r, c in results if c is not None}
    for r in rows:
        if r.error:
            continue
        vals = [getattr(r, f) for f in metrics.METRIC_FIELDS if getattr(r, f) is not None]
        if any(not (0.0 <= v <= 1.0) for v in vals) or (r.k > 1 and r.iou_best < r.iou_mean - 1e-12):
            raise InvariantViolation(f"{r.obs_id}: metric out of range")
    mdir = cfg.output / "metrics"
    _write_text(mdir / f"{method}.csv", metrics.metrics_csv(rows))
    _write_text(mdir / f"{method}_prefix.csv", _prefix_text(curves))
    report.write_tables(rows, mdir, prefix=f"{method}_")
    n_err = sum(1 for r in rows if r.error)
    if n_err:
        print(f"{method}: {n_err} records not scored (see error column)", file=sys.stderr)
    print(f"{method}: scored {len(rows) - n_err} records")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    mdir = cfg.output / "metrics"
    files = sorted(mdir.glob("*.csv")) if mdir.is_dir() else []
    files = [p for p in files if not p.stem.endswith("_prefix") and "aggregate_" not in p.stem]
    if not files:
        raise InputError(f"no metrics CSVs under {mdir}; run evaluate first")
    records, curves = [], {}
    for p in files:
        records.extend(metrics.read_metrics_csv(p.read_text(encoding="utf-8")))
        pre = mdir / f"{p.stem}_prefix.csv"
        if pre.exists():
            curves[p.stem] = report.read_prefix_curves(pre.read_text(encoding="utf-8"))
    rdir = cfg.output / "report"
    written = report.write_tables(records, rdir)
    _write_text(rdir / "best_of_k_prefix.csv", report.prefix_csv(curves))
    written += report.render_figures([r for r in records if not r.error], curves, rdir)
    print(report.aggregate_text(metrics.aggregate(records, report.GROUPINGS["overall"]), report.GROUPINGS["overall"]))
    print(f"report written to {rdir} ({len(written) + 1} files)")
    return EXIT_OK


def cmd_multisolution(cfg: RunConfig, obs_ids: list[str], name: str, methods: list[str] | None,
                      manifest: Path | None = None) -> int:
    if len(obs_ids) < 2:
        raise ConfigError("multisolution needs at least two --obs ids")
    path = manifest or cfg.output / "manifest.jsonl"
    by_id = {e.obs_id: e for e in _read_manifest(path)}
    missing = [o for o in obs_ids if o not in by_id]
    if missing:
        raise InputError(f"obs ids not in {path.name}: {', '.join(missing)}")
    recs = [_load_record(cfg, by_id[o]) for o in obs_ids]
    try:
        inst = multisolution.build_instance(recs)
    except (multisolution.UninformativeInstanceError, GridCompositionError) as exc:
        raise InputError(str(exc)) from exc
    if inst.consistency_violations():
        raise InvariantViolation("solutions disagree with the shared evidence")
    idir = cfg.output / "multisolution" / name
    multisolution.write_instance(inst, idir, name)
    pseudo = SimpleNamespace(obs_id=name, f_obs=inst.f_obs_syn, u=inst.u_syn, v=inst.v_syn)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method_tag", "k", "d_pg", "d_gp", "d_sym", "coverage", "diversity"])
    for m in methods or cfg.methods:
        try:
            ss = baselines.complete(m, pseudo, cfg.k, cfg.seed)
        except baselines.NoEvidenceError:
            continue
        d = metrics.distributional_eval(ss, inst.solutions, inst.eval_syn)
        div = "n/a" if m != "uniform_random" or d.diversity is None else repr(d.diversity)
        w.writerow([m, ss.k, repr(d.d_pg), repr(d.d_gp), repr(d.d_sym), repr(d.coverage), div])
    _write_text(idir / "distributional.csv", buf.getvalue())
    print(f"instance {name}: {len(inst.solutions)} solutions, {inst.promoted_count} promoted cells, "
          f"multimodal={inst.is_multimodal()}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="floorbench", description="BEV floormap benchmark pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="INI run configuration")
    common.add_argument("-o", "--output", type=Path, help="output root (overrides config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", parents=[common], help="render observations from scenes")
    s.add_argument("--observations-per-scene", type=int)
    s.add_argument("--procgen-count", type=int)

    s = sub.add_parser("curate", parents=[common], help="validate, filter, tier and split")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--tau", type=float)
    s.add_argument("--ood-sources", type=lambda x: tuple(t for t in x.split(",") if t))

    s = sub.add_parser("complete", parents=[common], help="run a built-in completer")
    s.add_argument("--method", required=True)
    s.add_argument("-k", type=int)
    s.add_argument("--manifest", type=Path)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions")
    s.add_argument("--method", required=True, help="method tag (also names predictions/{method})")
    s.add_argument("--predictions", type=Path, help="directory of {obs_id}_s{k}.png files")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--boundary-radius", type=int)

    sub.add_parser("report", parents=[common], help="merge metrics into tables and figures")

    s = sub.add_parser("multisolution", parents=[common], help="build a multi-solution instance")
    s.add_argument("--obs", nargs="+", required=True)
    s.add_argument("--name", default="instance")
    s.add_argument("--methods", type=lambda x: [t for t in x.split(",") if t])
    s.add_argument("--manifest", type=Path)
    return p


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = dict(output=args.output, seed=args.seed, workers=args.workers)
    for name in ("observations_per_scene", "tau", "ood_sources", "boundary_radius"):
        over[name] = getattr(args, name, None)
    if getattr(args, "procgen_count", None) is not None:
        over["procgen_count"] = args.procgen_count
    return cfg.with_overrides(**over)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        logging.basicConfig(level=getattr(logging, cfg.log_level, logging.WARNING), format="%(levelname)s %(message)s")
        if args.command == "synthesize":
            return cmd_synthesize(cfg)
        if args.command == "curate":
            return cmd_curate(cfg, args.manifest)
        if args.command == "complete":
            return cmd_complete(cfg, args.method, args.k, args.manifest)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.method, args.predictions, args.manifest)
        if args.command == "report":
            return cmd_report(cfg)
        return cmd_multisolution(cfg, args.obs, args.name, args.methods, args.manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, baselines.MissingPredictionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
