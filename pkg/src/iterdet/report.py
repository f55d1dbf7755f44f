"""Serialization of evaluation results: JSON, aligned text tables and CSV."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from .metrics import EvalSample, MetricsReport, evaluate, pr_curve

REPORT_VERSION = 1

# (header, field, format) for the text table
_COLUMNS = (
    ("label", "label", "{}"),
    ("images", "images", "{:d}"),
    ("GT", "ground_truth", "{:d}"),
    ("recall@thr", "recall", "{:.2f}"),
    ("recall@fppi1", "recall_fppi1", "{:.2f}"),
    ("AP", "ap", "{:.2f}"),
    ("mMR", "mmr", "{:.2f}"),
    ("crowd.recall", "crowded_recall", "{:.2f}"),
    ("crowd.n", "crowded_objects", "{:d}"),
    ("TP", "tp", "{:d}"),
    ("FP", "fp", "{:d}"),
    ("FN", "fn", "{:d}"),
)


def _clean(value):
    # JSON has no NaN; undefined percentages (e.g. no crowded objects) become null
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_clean(v) for v in value]
    return value


def report_to_dict(report: MetricsReport) -> dict:
    return _clean(asdict(report))


def report_from_dict(d: dict) -> MetricsReport:
    names = {f.name for f in fields(MetricsReport)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown report keys: {sorted(unknown)}")
    d = dict(d)
    if d.get("crowded_recall") is None:
        d["crowded_recall"] = math.nan
    return MetricsReport(**d)


def reports_to_json(reports: Sequence[MetricsReport]) -> str:
    doc = {"version": REPORT_VERSION, "reports": [report_to_dict(r) for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list[MetricsReport]:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"not a version-{REPORT_VERSION} metrics report")
    return [report_from_dict(r) for r in doc["reports"]]


def _cell(fmt, value):
    if isinstance(value, float) and math.isnan(value):
        return "n/a"
    return fmt.format(value)


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned plain-text table, one row per report; numbers right-aligned."""
    rows = [[h for h, _, _ in _COLUMNS]]
    for r in reports:
        rows.append([_cell(fmt, getattr(r, name)) for _, name, fmt in _COLUMNS])
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])]
        cells += [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    thr = {r.count_threshold for r in reports}
    if thr:
        lines.append(f"recall@thr and TP/FP/FN at score >= {', '.join(f'{t:g}' for t in sorted(thr))};"
                     " recall@fppi1 at the lowest threshold with <= 1 false positive per image")
    return "\n".join(lines) + "\n"


def per_iteration_reports(results, ground_truth, sizes, iterations: Sequence[int], label: str,
                          count_threshold: float = 0.05) -> list[MetricsReport]:
    """One report per iteration budget ``m``, taken from runs of ``max(iterations)``.

    Keeping the detections tagged ``<= m`` of a longer run is the same as
    running ``m`` iterations, since later iterations never alter earlier ones.
    """
    out = []
    for m in iterations:
        samples = [EvalSample(r.upto(m), gt, w, h)
                   for r, gt, (w, h) in zip(results, ground_truth, sizes)]
        out.append(evaluate(samples, f"{label} m={m}", count_threshold))
    return out


def write_pr_csv(path, samples: Sequence[EvalSample]) -> None:
    """Pooled precision/recall at every distinct score threshold."""
    thr, precision, recall = pr_curve(samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for row in zip(thr, precision, recall):
            w.writerow([repr(float(v)) for v in row])


def write_iterations_csv(path, iterations: Sequence[int], reports: Sequence[MetricsReport]) -> None:
    """AP / recall / mMR against the iteration budget, for plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iterations", "ap", "recall", "recall_fppi1", "mmr", "crowded_recall"])
        for m, r in zip(iterations, reports):
            w.writerow([m, f"{r.ap:.6f}", f"{r.recall:.6f}", f"{r.recall_fppi1:.6f}",
                        f"{r.mmr:.6f}", f"{r.crowded_recall:.6f}"])


def write_reports(out_dir, reports: Sequence[MetricsReport]) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    js, txt = out_dir / "metrics.json", out_dir / "metrics.txt"
    js.write_text(reports_to_json(reports))
    txt.write_text(format_table(reports))
    return js, txt
