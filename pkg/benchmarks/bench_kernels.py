"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the
speed-up. Outputs of the two backends are compared before timing.
"""

import argparse
import timeit

import numpy as np

from iterdet import _kernels_py

try:
    from iterdet import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    boxes = np.concatenate([rng.uniform(-10, 120, (40, 2)), rng.uniform(2, 40, (40, 2))], axis=1)
    nms_boxes = np.concatenate([rng.uniform(0, 60, (300, 2)), rng.uniform(4, 20, (300, 2))], axis=1)
    scores = rng.uniform(size=300)
    x = np.ascontiguousarray(rng.normal(size=(16, 16, 34, 34)))
    oh = ow = 32
    cols = np.ascontiguousarray(rng.normal(size=(16, 16 * 9, oh * ow)))
    return {
        "rasterize 40 boxes, 128x128": lambda k: k.rasterize(boxes, 128, 128),
        "iou_matrix 300x300": lambda k: k.iou_matrix(nms_boxes, nms_boxes),
        "greedy_nms 300 boxes": lambda k: k.greedy_nms(nms_boxes, scores, 0.5),
        "im2col 16x16x32x32 k3": lambda k: k.im2col(x, 3, 1, oh, ow),
        "col2im 16x16x32x32 k3": lambda k: k.col2im(cols, 16, 34, 34, 3, 1, oh, ow),
    }


def median_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return float(np.median(timeit.repeat(fn, number=number, repeat=repeat))) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'python':>12} {'cython':>12} {'speed-up':>9}")
    for name, call in cases(rng).items():
        a, b = call(_kernels_py), call(_ckernels)
        if not np.allclose(np.asarray(a), np.asarray(b), atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        tp = median_time(lambda: call(_kernels_py), args.repeat)
        tc = median_time(lambda: call(_ckernels), args.repeat)
        print(f"{name:<30} {tp * 1e3:10.3f}ms {tc * 1e3:10.3f}ms {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
