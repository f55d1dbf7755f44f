"""Crowded-scene detection metrics: matching, recall, AP, log-average miss rate.

Detections are pooled across images and swept over every distinct score as
an operating threshold (keep detections with ``score >= t``). Detections
sharing a score therefore enter the curves together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BBox, ScoredBox, boxes_to_array, clip_box, iou_matrix
from .synthetic import CROWDING_THRESHOLDS

MATCH_IOU = 0.5
MISS_RATE_FLOOR = 1e-5
FPPI_TARGETS = tuple(10.0 ** (-2.0 + k / 4.0) for k in range(9))


class MetricsError(ValueError):
    pass


@dataclass
class EvalSample:
    detections: list
    ground_truth: list
    width: int | None = None
    height: int | None = None


def _eval_boxes(sample: EvalSample) -> tuple[np.ndarray, np.ndarray]:
    """Detection boxes clipped to the image (when its size is known) and a validity mask."""
    boxes = boxes_to_array(sample.detections)
    valid = np.ones(len(boxes), dtype=bool)
    if sample.width is not None and sample.height is not None:
        for i, d in enumerate(sample.detections):
            b = d.box if isinstance(d, ScoredBox) else BBox(*d[:4])
            c = clip_box(b, sample.width, sample.height)
            if c is None:
                valid[i] = False
            else:
                boxes[i] = c.as_tuple()
    return boxes, valid


def match_detections(sample: EvalSample, iou_threshold: float = MATCH_IOU) -> list[bool]:
    """TP/FP label for each detection, in the input order.

    Detections are visited by descending score (equal scores: lower input
    index first); each takes the unmatched ground truth of highest IoU if that
    IoU reaches the threshold. Each ground-truth box matches at most once.
    """
    return [gt >= 0 for gt in match_indices(sample, iou_threshold)]


def match_indices(sample: EvalSample, iou_threshold: float = MATCH_IOU) -> list[int]:
    """Index of the matched ground-truth box per detection, or -1."""
    n = len(sample.detections)
    out = [-1] * n
    if n == 0 or not sample.ground_truth:
        return out
    boxes, valid = _eval_boxes(sample)
    scores = np.array([d.score for d in sample.detections])
    ious = iou_matrix(boxes, boxes_to_array(sample.ground_truth))
    taken = np.zeros(ious.shape[1], dtype=bool)
    for i in np.argsort(-scores, kind="stable"):
        if not valid[i]:
            continue
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            taken[j] = True
            out[i] = j
    return out


def _pool(samples: Sequence[EvalSample], iou_threshold=MATCH_IOU):
    scores, labels = [], []
    n_gt = 0
    for s in samples:
        scores.extend(d.score for d in s.detections)
        labels.extend(match_detections(s, iou_threshold))
        n_gt += len(s.ground_truth)
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool), n_gt


def _sweep(scores: np.ndarray, labels: np.ndarray):
    """Cumulative ``(thresholds, tp, fp)`` at each distinct score, strictest first."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    last = np.r_[s[1:] != s[:-1], True] if len(s) else np.zeros(0, dtype=bool)
    return s[last], tp[last], fp[last]


def _require_gt(n_gt):
    if n_gt == 0:
        raise MetricsError("no ground-truth boxes: recall is undefined")


def pr_curve(samples: Sequence[EvalSample]):
    """``(thresholds, precision, recall)`` with recall as a fraction."""
    scores, labels, n_gt = _pool(samples)
    _require_gt(n_gt)
    thr, tp, fp = _sweep(scores, labels)
    return thr, tp / np.maximum(tp + fp, 1), tp / n_gt


def average_precision(samples: Sequence[EvalSample]) -> float:
    """All-point interpolated AP at IoU 0.5, in percent."""
    _, precision, recall = pr_curve(samples)
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(100.0 * np.sum(steps * envelope))


def recall_at(samples: Sequence[EvalSample], score_threshold: float) -> float:
    scores, labels, n_gt = _pool(samples)
    _require_gt(n_gt)
    return float(100.0 * np.sum(labels & (scores >= score_threshold)) / n_gt)


def fppi_curve(samples: Sequence[EvalSample]):
    """``(thresholds, fppi, recall)`` with recall as a fraction."""
    if len(samples) == 0:
        raise MetricsError("mMR needs at least one image")
    scores, labels, n_gt = _pool(samples)
    _require_gt(n_gt)
    thr, tp, fp = _sweep(scores, labels)
    return thr, fp / len(samples), tp / n_gt


def _operating_point(fppi: np.ndarray, target: float) -> int:
    """Index of the lowest threshold with FPPI <= target (strictest if none qualifies)."""
    ok = np.nonzero(fppi <= target)[0]
    return int(ok[-1]) if len(ok) else 0


def miss_rates(samples: Sequence[EvalSample]) -> np.ndarray:
    """Miss rate at each of the nine reference FPPI values."""
    _, fppi, recall = fppi_curve(samples)
    if len(fppi) == 0:
        return np.ones(len(FPPI_TARGETS))
    return np.array([1.0 - recall[_operating_point(fppi, t)] for t in FPPI_TARGETS])


def mmr(samples: Sequence[EvalSample]) -> float:
    """Log-average miss rate over FPPI in [1e-2, 1], in percent (lower is better)."""
    mr = np.maximum(miss_rates(samples), MISS_RATE_FLOOR)
    return float(100.0 * np.exp(np.mean(np.log(mr))))


def recall_at_fppi(samples: Sequence[EvalSample], target: float = 1.0) -> tuple[float, float]:
    """``(recall %, threshold)`` at the lowest threshold keeping FPPI <= ``target``."""
    thr, fppi, recall = fppi_curve(samples)
    if len(thr) == 0:
        return 0.0, float("nan")
    i = _operating_point(fppi, target)
    return float(100.0 * recall[i]), float(thr[i])


def crowded_mask(ground_truth: Sequence, partner_iou: float = 0.5) -> np.ndarray:
    """True for boxes that overlap some other box of the same image with IoU > ``partner_iou``."""
    n = len(ground_truth)
    if n < 2:
        return np.zeros(n, dtype=bool)
    m = iou_matrix(ground_truth, ground_truth)
    np.fill_diagonal(m, 0.0)
    return (m > partner_iou).any(axis=1)


def crowded_recall(samples: Sequence[EvalSample], score_threshold: float = 0.05,
                   partner_iou: float = 0.5) -> tuple[float, int]:
    """Recall (percent) restricted to crowded ground truth, and the subset size."""
    hit = total = 0
    for s in samples:
        mask = crowded_mask(s.ground_truth, partner_iou)
        if not mask.any():
            continue
        kept = [d for d in s.detections if d.score >= score_threshold]
        matched = {j for j in match_indices(EvalSample(kept, s.ground_truth, s.width, s.height))
                   if j >= 0}
        total += int(mask.sum())
        hit += sum(1 for j in np.nonzero(mask)[0] if j in matched)
    if total == 0:
        return float("nan"), 0
    return 100.0 * hit / total, total


def counts_at(samples: Sequence[EvalSample], score_threshold: float = 0.05) -> dict:
    scores, labels, n_gt = _pool(samples)
    keep = scores >= score_threshold
    tp = int(np.sum(labels & keep))
    return {"tp": tp, "fp": int(np.sum(~labels & keep)), "fn": n_gt - tp}


def crowding_stats(dataset: Sequence, thresholds=CROWDING_THRESHOLDS) -> dict:
    """Mean objects per image and mean overlapping GT pairs per image per IoU threshold.

    ``dataset`` holds scene samples or plain box lists.
    """
    pairs = {f"{t:.1f}": 0.0 for t in thresholds}
    if len(dataset) == 0:
        return {"images": 0, "objects_per_image": 0.0, "pairs_per_image": pairs}
    objects = 0
    for item in dataset:
        boxes = getattr(item, "boxes", item)
        objects += len(boxes)
        if len(boxes) < 2:
            continue
        m = iou_matrix(boxes, boxes)
        upper = m[np.triu_indices(len(boxes), k=1)]
        for t in thresholds:
            pairs[f"{t:.1f}"] += float((upper > t).sum())
    n = len(dataset)
    return {
        "images": n,
        "objects_per_image": objects / n,
        "pairs_per_image": {k: v / n for k, v in pairs.items()},
    }


@dataclass
class MetricsReport:
    """Summary for one evaluation run; percentages throughout."""

    label: str
    images: int
    ground_truth: int
    recall: float  # at score >= count_threshold
    recall_fppi1: float  # at the lowest threshold with FPPI <= 1
    ap: float
    mmr: float
    crowded_recall: float
    crowded_objects: int
    tp: int
    fp: int
    fn: int
    count_threshold: float = 0.05
    per_iteration: list = field(default_factory=list)


def evaluate(samples: Sequence[EvalSample], label: str = "", count_threshold: float = 0.05,
             per_iteration: list | None = None) -> MetricsReport:
    c = counts_at(samples, count_threshold)
    crowd, n_crowd = crowded_recall(samples, count_threshold)
    return MetricsReport(
        label=label,
        images=len(samples),
        ground_truth=sum(len(s.ground_truth) for s in samples),
        recall=recall_at(samples, count_threshold),
        recall_fppi1=recall_at_fppi(samples, 1.0)[0],
        ap=average_precision(samples),
        mmr=mmr(samples),
        crowded_recall=crowd,
        crowded_objects=n_crowd,
        count_threshold=count_threshold,
        per_iteration=per_iteration or [],
        **c,
    )
