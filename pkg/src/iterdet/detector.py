"""Tiny history-aware dense detector.

An image stem and a history stem are summed before the first ReLU, followed by
a small conv trunk and an anchor-free head that predicts, per output location,
an objectness logit and log-distances to the four box edges.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import nn
from .geometry import BBox, HistoryMap, ScoredBox, boxes_to_array
from .nms import greedy_nms_arrays

# decode-time clamp on predicted log-distances; e**8 px is far beyond any image
_MAX_LOG_DIST = 8.0
# regression targets closer than this to an edge are clamped before the log
_MIN_DIST = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    stem_channels: int = 16
    trunk_depth: int = 3
    stem_kernel: int = 7
    stem_stride: int = 2
    history_kernel: int = 3
    history_stride: int = 2
    head_stride: int = 4
    head_kernel: int = 3
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    prior_prob: float = 0.01

    def __post_init__(self):
        if self.history_stride != self.stem_stride:
            raise ValueError(
                "history stem must produce the image stem's output shape: "
                f"strides {self.history_stride} != {self.stem_stride}"
            )
        for k in (self.stem_kernel, self.history_kernel, self.head_kernel):
            if k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        ratio = self.head_stride // self.stem_stride
        if self.head_stride % self.stem_stride or ratio & (ratio - 1):
            raise ValueError(
                f"head_stride {self.head_stride} must be stem_stride times a power of two"
            )
        if ratio.bit_length() - 1 > self.trunk_depth:
            raise ValueError(
                f"trunk_depth {self.trunk_depth} too shallow for head_stride {self.head_stride}"
            )
        if self.stem_channels < 1:
            raise ValueError("stem_channels must be positive")

    @property
    def trunk_strides(self) -> list[int]:
        n_down = (self.head_stride // self.stem_stride).bit_length() - 1
        return [2] * n_down + [1] * (self.trunk_depth - n_down)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DetectorParams:
    image_stem: nn.ConvLayer
    history_stem: nn.ConvLayer
    trunk: list
    score_head: nn.ConvLayer
    box_head: nn.ConvLayer

    def layers(self) -> dict:
        out = {"image_stem": self.image_stem, "history_stem": self.history_stem}
        for i, layer in enumerate(self.trunk):
            out[f"trunk.{i}"] = layer
        out["score_head"] = self.score_head
        out["box_head"] = self.box_head
        return out

    def tensors(self) -> dict:
        """Flat name -> array view; updating the arrays in place updates the model."""
        out = {}
        for name, layer in self.layers().items():
            out[f"{name}.w"] = layer.weights
            out[f"{name}.b"] = layer.bias
        return out

    def copy(self) -> "DetectorParams":
        def cp(layer):
            return nn.ConvLayer(layer.weights.copy(), layer.bias.copy(), layer.stride, layer.padding)

        return DetectorParams(cp(self.image_stem), cp(self.history_stem),
                              [cp(t) for t in self.trunk], cp(self.score_head), cp(self.box_head))


@dataclass
class DenseOutput:
    score_logits: np.ndarray  # [1, H', W']
    box_distances: np.ndarray  # [4, H', W'], log-space (l, t, r, b)


def init_params(config: DetectorConfig, rng: np.random.Generator) -> DetectorParams:
    """Seeded initialization; the history stem starts at exactly zero."""
    c = config.stem_channels
    stem = nn.init_conv(rng, 3, c, config.stem_kernel, config.stem_stride)
    hist = nn.ConvLayer(
        np.zeros((c, 1, config.history_kernel, config.history_kernel)), np.zeros(c),
        config.history_stride, config.history_kernel // 2,
    )
    trunk = [nn.init_conv(rng, c, c, 3, s) for s in config.trunk_strides]
    score = nn.init_conv(rng, c, 1, config.head_kernel)
    score.bias[:] = -math.log((1.0 - config.prior_prob) / config.prior_prob)
    box = nn.init_conv(rng, c, 4, config.head_kernel)
    return DetectorParams(stem, hist, trunk, score, box)


def params_from_tensors(config: DetectorConfig, tensors: dict) -> DetectorParams:
    """Rebuild :class:`DetectorParams` from a flat tensor dict (e.g. a checkpoint)."""
    template = init_params(config, np.random.default_rng(0))
    expected = template.tensors()
    if set(expected) != set(tensors):
        raise ValueError(
            "checkpoint tensors do not match detector config: "
            f"missing {sorted(set(expected) - set(tensors))}, "
            f"unexpected {sorted(set(tensors) - set(expected))}"
        )
    for name, arr in expected.items():
        if arr.shape != tensors[name].shape:
            raise ValueError(f"{name}: checkpoint shape {tensors[name].shape} != {arr.shape}")
        arr[...] = tensors[name]
    return template


def location_centers(out_h: int, out_w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-space centers ``(cx [W'], cy [H'])`` of the output cells."""
    off = (stride - 1) / 2.0
    return np.arange(out_w) * stride + off, np.arange(out_h) * stride + off


def _image_input(images):
    return np.asarray(images, dtype=np.float64) - 0.5


def _history_input(history, shape) -> np.ndarray:
    if isinstance(history, HistoryMap):
        h = history.as_float()
    else:
        h = np.asarray(history, dtype=np.float64)
    if h.shape != shape:
        raise nn.ShapeError(f"history {h.shape[::-1]} (WxH) does not match image {shape[::-1]}")
    return h


def forward_batch(images: np.ndarray, histories: np.ndarray | None, params: DetectorParams,
                  keep_cache: bool = False):
    """Batched forward pass.

    ``images`` is ``[N, 3, H, W]``; ``histories`` is ``[N, 1, H, W]`` float
    counts or None to drop the history branch entirely. Returns
    ``(score_logits [N,1,H',W'], box_distances [N,4,H',W'], cache)``.
    """
    x = _image_input(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise nn.ShapeError(f"images must be [N, 3, H, W], got {x.shape}")
    cache = {"x": x, "h": histories}
    z, cache["cols.image_stem"] = nn.conv2d_forward(x, params.image_stem, return_cols=True)
    if histories is not None:
        if histories.shape != (x.shape[0], 1) + x.shape[2:]:
            raise nn.ShapeError(
                f"histories {histories.shape} do not match images {x.shape}"
            )
        zh, cache["cols.history_stem"] = nn.conv2d_forward(
            histories, params.history_stem, return_cols=True)
        z = z + zh
    cache["z.0"] = z
    f = nn.relu_forward(z)
    for i, layer in enumerate(params.trunk):
        cache[f"f.{i}"] = f
        z, cache[f"cols.trunk.{i}"] = nn.conv2d_forward(f, layer, return_cols=True)
        cache[f"z.{i + 1}"] = z
        f = nn.relu_forward(z)
    cache["f.head"] = f
    s, cache["cols.score_head"] = nn.conv2d_forward(f, params.score_head, return_cols=True)
    d, cache["cols.box_head"] = nn.conv2d_forward(f, params.box_head, return_cols=True)
    return s, d, (cache if keep_cache else None)


def backward_batch(params: DetectorParams, cache: dict, grad_s: np.ndarray,
                   grad_d: np.ndarray) -> dict:
    """Parameter gradients given upstream gradients of the two head outputs."""
    grads = {}
    f = cache["f.head"]
    gf, grads["score_head.w"], grads["score_head.b"] = nn.conv2d_backward(
        f, params.score_head, grad_s, cols=cache["cols.score_head"])
    gf2, grads["box_head.w"], grads["box_head.b"] = nn.conv2d_backward(
        f, params.box_head, grad_d, cols=cache["cols.box_head"])
    gf = gf + gf2
    for i in reversed(range(len(params.trunk))):
        gz = nn.relu_backward(cache[f"z.{i + 1}"], gf)
        gf, grads[f"trunk.{i}.w"], grads[f"trunk.{i}.b"] = nn.conv2d_backward(
            cache[f"f.{i}"], params.trunk[i], gz, cols=cache[f"cols.trunk.{i}"])
    gz = nn.relu_backward(cache["z.0"], gf)
    _, grads["image_stem.w"], grads["image_stem.b"] = nn.conv2d_backward(
        cache["x"], params.image_stem, gz, cols=cache["cols.image_stem"], need_input_grad=False)
    if cache["h"] is not None:
        _, grads["history_stem.w"], grads["history_stem.b"] = nn.conv2d_backward(
            cache["h"], params.history_stem, gz, cols=cache["cols.history_stem"],
            need_input_grad=False)
    else:
        grads["history_stem.w"] = np.zeros_like(params.history_stem.weights)
        grads["history_stem.b"] = np.zeros_like(params.history_stem.bias)
    return grads


def forward(image: np.ndarray, history: HistoryMap | np.ndarray | None,
            params: DetectorParams) -> DenseOutput:
    """Single-image forward pass. ``history=None`` removes the history branch."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise nn.ShapeError(f"image must be [3, H, W], got {image.shape}")
    h = None
    if history is not None:
        h = _history_input(history, image.shape[1:])[None, None]
    s, d, _ = forward_batch(image[None], h, params)
    return DenseOutput(s[0], d[0])


def decode_arrays(out: DenseOutput, config: DetectorConfig, score_threshold=None,
                  nms_iou=None) -> tuple[np.ndarray, np.ndarray]:
    """Threshold, convert distances to xywh boxes, then greedy NMS.

    Returns ``(boxes [n, 4], scores [n])`` in descending-score order. Pass
    ``nms_iou=False`` to skip suppression.
    """
    thr = config.score_threshold if score_threshold is None else score_threshold
    iou_thr = config.nms_iou if nms_iou is None else nms_iou
    logits = out.score_logits[0]
    scores = expit(logits)
    ys, xs = np.nonzero(scores >= thr)
    if len(ys) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    cx, cy = location_centers(*logits.shape, config.head_stride)
    dist = np.exp(np.clip(out.box_distances[:, ys, xs], -_MAX_LOG_DIST, _MAX_LOG_DIST))
    l, t, r, b = dist
    boxes = np.stack([cx[xs] - l, cy[ys] - t, l + r, t + b], axis=1)
    sc = scores[ys, xs]
    if iou_thr is False:
        order = np.argsort(-sc, kind="stable")
        return boxes[order], sc[order]
    keep = greedy_nms_arrays(boxes, sc, iou_thr)
    return boxes[keep], sc[keep]


def decode(out: DenseOutput, config: DetectorConfig, iteration: int = 0) -> list[ScoredBox]:
    boxes, scores = decode_arrays(out, config)
    return [ScoredBox(BBox(*map(float, b)), float(s), iteration) for b, s in zip(boxes, scores)]


def assign_targets(targets: np.ndarray, out_h: int, out_w: int, stride: int):
    """Positive mask ``[H', W']`` and log-distance targets ``[4, H', W']``.

    A location is positive when its image-space center lies strictly inside a
    target box; overlapping candidates go to the smallest box (lowest index on
    equal area).
    """
    pos = np.zeros((out_h, out_w), dtype=bool)
    reg = np.zeros((4, out_h, out_w))
    if len(targets) == 0:
        return pos, reg
    cx, cy = location_centers(out_h, out_w, stride)
    gx = np.broadcast_to(cx[None, :], (out_h, out_w)).reshape(-1)
    gy = np.broadcast_to(cy[:, None], (out_h, out_w)).reshape(-1)
    x, y, w, h = targets.T
    inside = ((gx[None] > x[:, None]) & (gx[None] < (x + w)[:, None])
              & (gy[None] > y[:, None]) & (gy[None] < (y + h)[:, None]))
    area = np.where(inside, (w * h)[:, None], np.inf)
    best = np.argmin(area, axis=0)
    hit = inside.any(axis=0)
    pos = hit.reshape(out_h, out_w)
    bx, by, bw, bh = targets[best].T
    d = np.stack([gx - bx, gy - by, bx + bw - gx, by + bh - gy])
    d = np.log(np.maximum(d, _MIN_DIST))
    reg = np.where(hit[None], d, 0.0).reshape(4, out_h, out_w)
    return pos, reg


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_loss(logits: np.ndarray, pos: np.ndarray, alpha: float, gamma: float):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits."""
    p = expit(logits)
    log_p = -_softplus(-logits)
    log_q = -_softplus(logits)
    q = 1.0 - p
    loss_pos = -alpha * q ** gamma * log_p
    loss_neg = -(1.0 - alpha) * p ** gamma * log_q
    grad_pos = alpha * q ** gamma * (gamma * p * log_p - q)
    grad_neg = (1.0 - alpha) * p ** gamma * (p - gamma * q * log_q)
    return np.where(pos, loss_pos, loss_neg), np.where(pos, grad_pos, grad_neg)


def batch_loss_and_grads(images: np.ndarray, histories: np.ndarray,
                         targets: Sequence[np.ndarray], params: DetectorParams,
                         config: DetectorConfig) -> tuple[float, dict]:
    """Focal objectness + L1 log-distance loss, normalized by positives in the batch."""
    s, d, cache = forward_batch(images, histories, params, keep_cache=True)
    n, _, oh, ow = s.shape
    pos = np.zeros((n, 1, oh, ow), dtype=bool)
    reg = np.zeros((n, 4, oh, ow))
    for i, t in enumerate(targets):
        pos[i, 0], reg[i] = assign_targets(np.asarray(t, dtype=np.float64).reshape(-1, 4),
                                           oh, ow, config.head_stride)
    norm = max(1.0, float(pos.sum()))
    cls_loss, cls_grad = focal_loss(s, pos, config.focal_alpha, config.focal_gamma)
    diff = d - reg
    posf = np.broadcast_to(pos, d.shape)
    reg_loss = np.abs(diff)[posf].sum()
    loss = (cls_loss.sum() + reg_loss) / norm
    if not math.isfinite(loss):
        raise nn.NonFiniteError(f"non-finite detector loss {loss}")
    grad_s = cls_grad / norm
    grad_d = np.where(posf, np.sign(diff), 0.0) / norm
    return float(loss), backward_batch(params, cache, grad_s, grad_d)


def loss_and_grads(image: np.ndarray, history: HistoryMap | np.ndarray, targets: Sequence,
                   params: DetectorParams, config: DetectorConfig) -> tuple[float, dict]:
    image = np.asarray(image, dtype=np.float64)
    h = _history_input(history, image.shape[1:])[None, None]
    return batch_loss_and_grads(image[None], h, [boxes_to_array(targets)], params, config)
