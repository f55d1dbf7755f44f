"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when the
extension is not built or when ``ITERDET_PURE_PYTHON=1`` is set.
"""

import numpy as np


def im2col(xpad, k, stride, out_h, out_w):
    """Unfold a padded ``[N, C, Hp, Wp]`` batch into ``[N, C*k*k, out_h*out_w]``."""
    n, c = xpad.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=np.float64)
    h_span = stride * (out_h - 1) + 1
    w_span = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xpad[:, :, i:i + h_span:stride, j:j + w_span:stride]
    return cols.reshape(n, c * k * k, out_h * out_w)


def col2im(cols, c, hp, wp, k, stride, out_h, out_w):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``[N, C, Hp, Wp]``."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, k, k, out_h, out_w)
    xpad = np.zeros((n, c, hp, wp), dtype=np.float64)
    h_span = stride * (out_h - 1) + 1
    w_span = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            xpad[:, :, i:i + h_span:stride, j:j + w_span:stride] += cols[:, :, i, j]
    return xpad


def rasterize(boxes, width, height):
    """Per-pixel count of boxes covering each pixel, inclusive bounds, ``[H, W]`` int64."""
    diff = np.zeros((height + 1, width + 1), dtype=np.int64)
    if len(boxes):
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        x0 = np.maximum(np.ceil(b[:, 0]), 0)
        y0 = np.maximum(np.ceil(b[:, 1]), 0)
        x1 = np.minimum(np.floor(b[:, 0] + b[:, 2]), width - 1)
        y1 = np.minimum(np.floor(b[:, 1] + b[:, 3]), height - 1)
        ok = (x0 <= x1) & (y0 <= y1)
        x0, y0 = x0[ok].astype(np.int64), y0[ok].astype(np.int64)
        x1, y1 = x1[ok].astype(np.int64) + 1, y1[ok].astype(np.int64) + 1
        np.add.at(diff, (y0, x0), 1)
        np.add.at(diff, (y0, x1), -1)
        np.add.at(diff, (y1, x0), -1)
        np.add.at(diff, (y1, x1), 1)
    return diff.cumsum(axis=0).cumsum(axis=1)[:height, :width]


def iou_matrix(a, b):
    """Pairwise IoU between ``[n, 4]`` and ``[m, 4]`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    iy1 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, np.minimum(inter / np.where(union > 0, union, 1.0), 1.0), 0.0)


def greedy_nms(boxes, scores, iou_threshold):
    """Indices kept by greedy NMS, in descending-score order (ties: lower index first)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        if len(rest):
            ov = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[pos + 1:] |= ov > iou_threshold
    return np.asarray(keep, dtype=np.int64)
