"""Boxes, overlaps and the detection-history count map.

Coordinates follow the pixel-index convention: pixel ``(x, y)`` sits at integer
coordinate ``(x, y)``, so a box ``(x, y, w, h)`` covers the pixel columns
``ceil(x) .. floor(x + w)`` inclusive. A tight box around pixels ``x0..x1`` is
therefore ``(x0, ., x1 - x0, .)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive width and height: {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    score: float
    iteration: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.iteration < 0:
            raise ValueError(f"iteration must be nonnegative, got {self.iteration}")


@dataclass(frozen=True)
class HistoryMap:
    """Per-pixel count of already-detected boxes.

    ``counts`` is stored image-style as ``[height, width]``; use :meth:`at`
    for ``(x, y)`` access.
    """

    width: int
    height: int
    counts: np.ndarray

    def at(self, x: int, y: int) -> int:
        return int(self.counts[y, x])

    def as_float(self) -> np.ndarray:
        return self.counts.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, HistoryMap):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None


def _coords(b) -> tuple[float, float, float, float]:
    if isinstance(b, ScoredBox):
        b = b.box
    if isinstance(b, BBox):
        return b.as_tuple()
    x, y, w, h = b
    return (float(x), float(y), float(w), float(h))


def boxes_to_array(boxes: Iterable) -> np.ndarray:
    """Stack BBox / ScoredBox / 4-sequences into an ``[n, 4]`` float array."""
    rows = [_coords(b) for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return min(inter / (a.w * a.h + b.w * b.h - inter), 1.0)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU; accepts ``[n, 4]`` arrays or box sequences."""
    if not isinstance(a, np.ndarray):
        a = boxes_to_array(a)
    if not isinstance(b, np.ndarray):
        b = boxes_to_array(b)
    return kernels.iou_matrix(a, b)


def rasterize_history(boxes: Sequence, width: int, height: int) -> HistoryMap:
    """Count, for every pixel, the boxes whose inclusive extent covers it.

    Parts of boxes outside the ``width`` x ``height`` grid are dropped.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"grid must be non-empty, got {width}x{height}")
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    return HistoryMap(int(width), int(height), kernels.rasterize(arr, int(width), int(height)))


def clip_box(b: BBox, width: int, height: int) -> BBox | None:
    """Intersect ``b`` with the image rectangle ``[0, width-1] x [0, height-1]``.

    Returns None when the intersection has zero area.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"image must be non-empty, got {width}x{height}")
    x0 = max(b.x, 0.0)
    y0 = max(b.y, 0.0)
    x1 = min(b.x + b.w, float(width - 1))
    y1 = min(b.y + b.h, float(height - 1))
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def flip_boxes(boxes: np.ndarray, width: int) -> np.ndarray:
    """Mirror ``[n, 4]`` boxes horizontally about the image's central column."""
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0] = (width - 1) - (out[:, 0] + out[:, 2])
    return out
