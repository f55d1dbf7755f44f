"""Kernel backend selection.

The compiled extension is used when it has been built; otherwise the numpy
fallback is imported. Set ``ITERDET_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("ITERDET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
rasterize = _impl.rasterize
iou_matrix = _impl.iou_matrix
greedy_nms = _impl.greedy_nms

__all__ = ["BACKEND", "im2col", "col2im", "rasterize", "iou_matrix", "greedy_nms"]
