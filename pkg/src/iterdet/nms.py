"""Greedy NMS and linear soft-NMS.

Suppression is strict: a box is affected only when its IoU with the selected
box is greater than the threshold, so a threshold of 1.0 is a no-op.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import kernels
from .geometry import ScoredBox, boxes_to_array


def _check_threshold(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def greedy_nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices of kept boxes, highest score first; equal scores keep input order."""
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.greedy_nms(boxes, scores, float(iou_threshold))


def greedy_nms(boxes: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    _check_threshold("iou_threshold", iou_threshold)
    if not boxes:
        return []
    keep = greedy_nms_arrays(boxes_to_array(boxes), np.array([b.score for b in boxes]),
                             iou_threshold)
    return [boxes[i] for i in keep]


def soft_nms_linear(boxes: list[ScoredBox], iou_threshold: float,
                    final_threshold: float) -> list[ScoredBox]:
    """Linear soft-NMS: overlapping boxes are rescored ``s * (1 - IoU)`` instead of removed.

    Boxes are selected in order of their current (decayed) score; boxes whose
    score ends below ``final_threshold`` are dropped. Output is in selection
    order, which is descending in final score.
    """
    _check_threshold("iou_threshold", iou_threshold)
    _check_threshold("final_threshold", final_threshold)
    n = len(boxes)
    if n == 0:
        return []
    coords = boxes_to_array(boxes)
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    ious = kernels.iou_matrix(coords, coords)
    remaining = list(range(n))
    out = []
    while remaining:
        # max over current scores; ties resolve to the lowest input index
        best = max(remaining, key=lambda i: (scores[i], -i))
        remaining.remove(best)
        if scores[best] >= final_threshold:
            out.append(replace(boxes[best], score=float(scores[best])))
        for i in remaining:
            ov = ious[best, i]
            if ov > iou_threshold:
                scores[i] *= 1.0 - ov
    return out
