"""The iterative detection scheme.

Training feeds the detector a random subset of the ground truth as history and
asks it for the rest. Inference starts from an empty history, adds each pass's
detections to it, and stops at the iteration limit or on an empty pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import detector as det
from .geometry import BBox, ScoredBox, boxes_to_array, clip_box, flip_boxes, rasterize_history

MODES = ("standard", "one_per_iteration")
ZOOM_RANGE = (0.75, 1.25)
# A single argmax pick counts as an object only when the sigmoid says it is
# more likely than not; the dense 0.05 floor is almost always beaten somewhere.
PICK_SCORE = 0.5

# (image [3,H,W], history [H,W] float) -> (boxes [n,4], scores [n])
DetectFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class IterConfig:
    max_iterations: int = 2
    stop_score: float = 0.05
    mode: str = "standard"
    max_total: int = 100  # one_per_iteration only
    pick_score: float = PICK_SCORE  # one_per_iteration only

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_total < 1:
            raise ValueError("max_total must be >= 1")
        if not 0.0 <= self.pick_score <= 1.0:
            raise ValueError(f"pick_score must lie in [0, 1], got {self.pick_score}")


@dataclass
class IterResult:
    boxes: list
    per_iteration_counts: list
    iterations_run: int
    histories: list = field(default_factory=list)

    def upto(self, iteration: int) -> list[ScoredBox]:
        """Detections tagged with iterations ``<= iteration``."""
        return [b for b in self.boxes if b.iteration <= iteration]


def split_ground_truth(all_boxes, rng: np.random.Generator, keep_fraction: float | None = None):
    """Randomly partition boxes into ``(old, new)``.

    A fraction ``q ~ U[0, 1]`` is drawn per call (unless given) and each box
    joins ``old`` independently with probability ``q``; both halves keep the
    input order.
    """
    q = rng.uniform() if keep_fraction is None else keep_fraction
    n = len(all_boxes)
    if n == 0:
        return [], []
    in_old = rng.random(n) < q
    old = [b for b, o in zip(all_boxes, in_old) if o]
    new = [b for b, o in zip(all_boxes, in_old) if not o]
    return old, new


def zoom_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale about pixel (0, 0), keeping the canvas size; uncovered area is 0."""
    if factor == 1.0:
        return image.copy()
    return np.stack([
        ndimage.affine_transform(ch, np.diag([1.0 / factor, 1.0 / factor]), order=1,
                                 mode="constant", cval=0.0)
        for ch in image
    ])


def augment(image: np.ndarray, boxes: np.ndarray, flip: bool, zoom: float):
    """Apply zoom then horizontal flip to an image and its ``[n, 4]`` boxes.

    Boxes pushed entirely off the canvas are dropped; the rest are not clipped.
    """
    _, h, w = image.shape
    out = zoom_image(image, zoom)
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4) * zoom
    if len(b):
        visible = [clip_box(BBox(*r), w, h) is not None for r in b]
        b = b[np.asarray(visible, dtype=bool)]
    if flip:
        out = out[:, :, ::-1].copy()
        b = flip_boxes(b, w)
    return out, b


def jitter_boxes(boxes: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Perturb ``[n, 4]`` boxes: offsets ~ N(0, sigma * size), log-size ~ N(0, sigma)."""
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    if sigma <= 0 or len(b) == 0:
        return b
    noise = rng.normal(0.0, sigma, size=b.shape)
    out = b.copy()
    out[:, 0] += noise[:, 0] * b[:, 2]
    out[:, 1] += noise[:, 1] * b[:, 3]
    out[:, 2] *= np.exp(noise[:, 2])
    out[:, 3] *= np.exp(noise[:, 3])
    return out


def make_training_example(scene, rng: np.random.Generator, flip: bool | None = None,
                          zoom: float | None = None, keep_fraction: float | None = None,
                          history_jitter: float = 0.0):
    """``(image, history, targets)`` for one scene: augment, split, rasterize the old half.

    ``history_jitter`` perturbs the old boxes before rasterizing so the
    history resembles imperfect detections rather than exact annotations.
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if zoom is None:
        zoom = float(rng.uniform(*ZOOM_RANGE))
    image, boxes = augment(scene.image, boxes_to_array(scene.boxes), flip, zoom)
    old, new = split_ground_truth(list(boxes), rng, keep_fraction)
    old = jitter_boxes(boxes_to_array(old), rng, history_jitter)
    history = rasterize_history(old, image.shape[2], image.shape[1])
    return image, history, boxes_to_array(new)


def model_detector(params, det_config: det.DetectorConfig, nms: bool = True) -> DetectFn:
    def detect(image, history):
        out = det.forward(image, history, params)
        return det.decode_arrays(out, det_config, nms_iou=None if nms else False)

    return detect


def infer_iterative(image: np.ndarray, params, iter_config: IterConfig,
                    det_config: det.DetectorConfig, detector: DetectFn | None = None,
                    keep_histories: bool = False) -> IterResult:
    """Run up to ``max_iterations`` history-conditioned passes and union the results.

    No suppression across iterations: a box re-detected at a later pass is
    kept as a separate detection.
    """
    if iter_config.mode == "one_per_iteration":
        return infer_one_per_iteration(image, params, det_config, iter_config.max_total,
                                       iter_config.pick_score, detector, keep_histories)
    detect = detector or model_detector(params, det_config)
    _, h, w = image.shape
    history = np.zeros((h, w))
    found: list[ScoredBox] = []
    counts, histories = [], []
    t = 0
    for t in range(1, iter_config.max_iterations + 1):
        if keep_histories:
            histories.append(history)
        boxes, scores = detect(image, history)
        keep = scores >= iter_config.stop_score
        counts.append(int(keep.sum()))
        if not keep.any():
            break
        found.extend(ScoredBox(BBox(*map(float, b)), float(s), t)
                     for b, s in zip(boxes[keep], scores[keep]))
        history = rasterize_history(found, w, h).as_float()
    return IterResult(found, counts, t, histories)


def infer_one_per_iteration(image: np.ndarray, params, det_config: det.DetectorConfig,
                            max_total: int, pick_score: float = PICK_SCORE,
                            detector: DetectFn | None = None,
                            keep_histories: bool = False) -> IterResult:
    """Variant that keeps only the single most confident box per pass (no NMS).

    Stops when the best remaining score is below ``pick_score`` or after
    ``max_total`` boxes.
    """
    detect = detector or model_detector(params, det_config, nms=False)
    _, h, w = image.shape
    history = np.zeros((h, w))
    found: list[ScoredBox] = []
    counts, histories = [], []
    t = 0
    while len(found) < max_total:
        t += 1
        if keep_histories:
            histories.append(history)
        boxes, scores = detect(image, history)
        if len(scores) == 0 or scores.max() < pick_score:
            counts.append(0)
            break
        best = int(np.argmax(scores))
        found.append(ScoredBox(BBox(*map(float, boxes[best])), float(scores[best]), t))
        counts.append(1)
        history = history + rasterize_history([found[-1]], w, h).as_float()
    return IterResult(found, counts, t, histories)

