# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor

cnp.import_array()


def im2col(const double[:, :, :, ::1] xpad, int k, int stride, int out_h, int out_w):
    cdef Py_ssize_t n = xpad.shape[0], c = xpad.shape[1]
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, col
    out = np.empty((n, c * k * k, out_h * out_w), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        col = 0
                        for oy in range(out_h):
                            for ox in range(out_w):
                                cols[b, row, col] = xpad[b, ch, oy * stride + i, ox * stride + j]
                                col += 1
    return out


def col2im(const double[:, :, ::1] cols, int c, int hp, int wp, int k, int stride,
           int out_h, int out_w):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, col
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xpad = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        col = 0
                        for oy in range(out_h):
                            for ox in range(out_w):
                                xpad[b, ch, oy * stride + i, ox * stride + j] += cols[b, row, col]
                                col += 1
    return out


def rasterize(boxes, int width, int height):
    out = np.zeros((height, width), dtype=np.int64)
    if len(boxes) == 0:
        return out
    cdef double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef cnp.int64_t[:, ::1] counts = out
    cdef Py_ssize_t m, x, y
    cdef double fx0, fy0, fx1, fy1
    cdef Py_ssize_t x0, y0, x1, y1
    with nogil:
        for m in range(b.shape[0]):
            fx0 = ceil(b[m, 0])
            fy0 = ceil(b[m, 1])
            fx1 = floor(b[m, 0] + b[m, 2])
            fy1 = floor(b[m, 1] + b[m, 3])
            if fx0 < 0:
                fx0 = 0
            if fy0 < 0:
                fy0 = 0
            if fx1 > width - 1:
                fx1 = width - 1
            if fy1 > height - 1:
                fy1 = height - 1
            if fx0 > fx1 or fy0 > fy1:
                continue
            x0 = <Py_ssize_t>fx0
            y0 = <Py_ssize_t>fy0
            x1 = <Py_ssize_t>fx1
            y1 = <Py_ssize_t>fy1
            for y in range(y0, y1 + 1):
                for x in range(x0, x1 + 1):
                    counts[y, x] += 1
    return out


cdef inline double _iou(double[:, ::1] a, Py_ssize_t p,
                        double[:, ::1] b, Py_ssize_t q) noexcept nogil:
    cdef double ix0 = a[p, 0] if a[p, 0] > b[q, 0] else b[q, 0]
    cdef double iy0 = a[p, 1] if a[p, 1] > b[q, 1] else b[q, 1]
    cdef double ex_p = a[p, 0] + a[p, 2]
    cdef double ex_q = b[q, 0] + b[q, 2]
    cdef double ey_p = a[p, 1] + a[p, 3]
    cdef double ey_q = b[q, 1] + b[q, 3]
    cdef double ix1 = ex_p if ex_p < ex_q else ex_q
    cdef double iy1 = ey_p if ey_p < ey_q else ey_q
    cdef double iw = ix1 - ix0
    cdef double ih = iy1 - iy0
    if iw < 0:
        iw = 0
    if ih < 0:
        ih = 0
    cdef double inter = iw * ih
    cdef double union = a[p, 2] * a[p, 3] + b[q, 2] * b[q, 3] - inter
    if union > 0:
        return min(inter / union, 1.0)
    return 0.0


def iou_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(av, i, bv, j)
    return out


def greedy_nms(boxes, scores, double iou_threshold):
    cdef double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order_arr = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    cdef cnp.int64_t[::1] order = order_arr
    cdef Py_ssize_t n = order.shape[0], p, q
    supp_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = supp_arr
    keep_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    cdef Py_ssize_t nkeep = 0
    with nogil:
        for p in range(n):
            if suppressed[p]:
                continue
            keep[nkeep] = order[p]
            nkeep += 1
            for q in range(p + 1, n):
                if not suppressed[q] and _iou(b, order[p], b, order[q]) > iou_threshold:
                    suppressed[q] = 1
    return keep_arr[:nkeep].copy()
