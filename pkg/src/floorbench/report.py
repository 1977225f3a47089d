"""Aggregate tables (CSV and aligned text) and report figures."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_FIELDS, AggregateRow, MetricsRecord, aggregate  # noqa: E402

GROUPINGS = {
    "overall": ("method_tag", "split"),
    "by_distribution": ("method_tag", "split", "distribution"),
    "by_tier": ("method_tag", "split", "distribution", "tier"),
}
TABLE_METRICS = ("umr", "iou", "f1", "mes", "iou_best", "iou_mean", "var_mean", "var_interior", "var_boundary")
_PNG_META = {"Software": None}


def _num(x) -> str:
    return "" if x is None else f"{x:.6f}"


def aggregate_csv(rows: Sequence[AggregateRow], keys: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(keys) + ["n"]
    for m in METRIC_FIELDS:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    for r in rows:
        line = list(r.group) + [r.n]
        for m in METRIC_FIELDS:
            line += [_num(r.mean[m]), _num(r.std[m])]
        w.writerow(line)
    return buf.getvalue()


def aggregate_text(rows: Sequence[AggregateRow], keys: Sequence[str], metrics: Sequence[str] = TABLE_METRICS) -> str:
    """Fixed-width table of ``mean ± std`` cells."""
    header = list(keys) + ["n"] + list(metrics)
    body = []
    for r in rows:
        cells = list(r.group) + [str(r.n)]
        for m in metrics:
            mu, sd = r.mean[m], r.std[m]
            cells.append("n/a" if mu is None else f"{mu:.3f} ± {sd:.3f}")
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def prefix_csv(curves: Mapping[str, Mapping[str, Sequence[float]]]) -> str:
    """Mean best-of-prefix IoU per method and prefix length."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method_tag", "prefix", "n", "iou_best_mean"])
    for method in sorted(curves):
        per_obs = curves[method]
        if not per_obs:
            continue
        kmax = max(len(c) for c in per_obs.values())
        for j in range(kmax):
            vals = [c[j] for _, c in sorted(per_obs.items()) if len(c) > j]
            w.writerow([method, j + 1, len(vals), f"{sum(vals) / len(vals):.6f}"])
    return buf.getvalue()


def read_prefix_curves(text: str) -> dict[str, list[float]]:
    """Parse a per-record best-of-prefix CSV (obs_id, p1, p2, ...)."""
    out = {}
    rows = list(csv.reader(io.StringIO(text)))
    for row in rows[1:]:
        out[row[0]] = [float(x) for x in row[1:] if x != ""]
    return out


def write_tables(records: Sequence[MetricsRecord], outdir: Path, prefix: str = "") -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    subsets = {"": records, "hard_": [r for r in records if r.hard]}
    for tag, subset in subsets.items():
        for name, keys in GROUPINGS.items():
            if tag and name != "overall":
                continue
            rows = aggregate(subset, keys)
            for ext, text in (("csv", aggregate_csv(rows, keys)), ("txt", aggregate_text(rows, keys))):
                p = outdir / f"{prefix}{tag}aggregate_{name}.{ext}"
                p.write_text(text, encoding="utf-8")
                written.append(p)
    return written


def render_figures(records: Sequence[MetricsRecord], curves: Mapping[str, Mapping[str, Sequence[float]]],
                   outdir: Path) -> list[Path]:
    """Bar chart of headline metrics per method and the best-of-K prefix curve."""
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    rows = aggregate(records, ("method_tag",))
    methods = [r.group[0] for r in rows]
    shown = ("umr", "iou", "f1", "mes")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(1, len(shown))
    for i, m in enumerate(shown):
        means = [r.mean[m] or 0.0 for r in rows]
        stds = [r.std[m] or 0.0 for r in rows]
        xs = [j + (i - (len(shown) - 1) / 2) * width for j in range(len(rows))]
        ax.bar(xs, means, width, yerr=stds, label=m.upper(), capsize=2)
    ax.set_xticks(range(len(methods)), methods)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean over records")
    ax.legend(ncol=len(shown), fontsize="small")
    fig.tight_layout()
    p = outdir / "fidelity.png"
    fig.savefig(p, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted(curves):
        per_obs = curves[method]
        if not per_obs:
            continue
        kmax = max(len(c) for c in per_obs.values())
        ys = []
        for j in range(kmax):
            vals = [c[j] for c in per_obs.values() if len(c) > j]
            ys.append(sum(vals) / len(vals))
        ax.plot(range(1, kmax + 1), ys, marker="o", label=method)
    ax.set_xlabel("samples K")
    ax.set_ylabel("best-of-K IoU")
    ax.legend(fontsize="small")
    fig.tight_layout()
    p = outdir / "best_of_k.png"
    fig.savefig(p, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    written.append(p)
    return written
