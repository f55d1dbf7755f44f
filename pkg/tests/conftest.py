import sys

import numpy as np
import pytest

from iterdet import _kernels_py

try:
    from iterdet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [pytest.param(_kernels_py, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, lo=-10.0, hi=70.0, wmin=0.5, wmax=25.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(wmin, wmax, size=(n, 2))
    return np.concatenate([xy, wh], axis=1)


def brute_rasterize(boxes, width, height):
    counts = np.zeros((height, width), dtype=np.int64)
    for y in range(height):
        for x in range(width):
            for bx, by, bw, bh in boxes:
                if bx <= x <= bx + bw and by <= y <= by + bh:
                    counts[y, x] += 1
    return counts


def reference_nms(boxes, scores, thr):
    """O(n^2) greedy NMS written from the definition."""
    from iterdet.geometry import BBox, iou

    alive = list(range(len(scores)))
    keep = []
    while alive:
        best = alive[0]
        for i in alive:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        alive = [i for i in alive
                 if i != best and not iou(BBox(*boxes[i]), BBox(*boxes[best])) > thr]
    return keep


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[criterion])
