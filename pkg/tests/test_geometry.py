import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iterdet.geometry import BBox, HistoryMap, ScoredBox, clip_box, flip_boxes, iou, \
    iou_matrix, rasterize_history

from .conftest import brute_rasterize, random_boxes

coord = st.floats(-50, 50, allow_nan=False)
extent = st.floats(0.1, 40, allow_nan=False)
boxes_st = st.builds(BBox, coord, coord, extent, extent)


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, -1)
    with pytest.raises(ValueError):
        BBox(float("nan"), 0, 1, 1)
    with pytest.raises(ValueError):
        ScoredBox(BBox(0, 0, 1, 1), 1.5)


def test_iou_examples():
    assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 2, 2)) == pytest.approx(1 / 3)


@given(boxes_st, boxes_st)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert iou(a, a) == pytest.approx(1.0)
    assert iou_matrix([a], [b])[0, 0] == pytest.approx(v, abs=1e-12)


def test_rasterize_examples():
    empty = rasterize_history([], 4, 4)
    assert empty.counts.shape == (4, 4) and not empty.counts.any()

    one = rasterize_history([BBox(0, 0, 2, 2)], 4, 4)
    expected = np.zeros((4, 4), dtype=int)
    expected[0:3, 0:3] = 1
    assert np.array_equal(one.counts, expected)

    two = rasterize_history([BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)], 8, 8)
    ref = brute_rasterize([(0, 0, 2, 2), (1, 1, 2, 2)], 8, 8)
    assert np.array_equal(two.counts, ref)
    ys, xs = np.nonzero(two.counts == 2)
    assert sorted(zip(xs.tolist(), ys.tolist())) == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_rasterize_matches_brute_force_random(rng):
    for _ in range(40):
        w, h = (int(v) for v in rng.integers(1, 128, size=2))
        boxes = random_boxes(rng, int(rng.integers(0, 50)), lo=-20, hi=130, wmax=40)
        hist = rasterize_history(boxes, w, h)
        assert np.array_equal(hist.counts, brute_rasterize(boxes, w, h))


def _clipped_block_area(b, w, h):
    x0, x1 = max(np.ceil(b[0]), 0), min(np.floor(b[0] + b[2]), w - 1)
    y0, y1 = max(np.ceil(b[1]), 0), min(np.floor(b[1] + b[3]), h - 1)
    return max(0, x1 - x0 + 1) * max(0, y1 - y0 + 1)


def test_history_mass_and_additivity(rng):
    for _ in range(30):
        a = random_boxes(rng, int(rng.integers(0, 20)))
        b = random_boxes(rng, int(rng.integers(0, 20)))
        ha, hb = rasterize_history(a, 64, 48), rasterize_history(b, 64, 48)
        hab = rasterize_history(np.concatenate([a, b]), 64, 48)
        assert np.array_equal(hab.counts, ha.counts + hb.counts)
        assert ha.counts.sum() == sum(_clipped_block_area(r, 64, 48) for r in a)
        assert ha.counts.min() >= 0 and ha.counts.max() <= len(a)


def test_history_map_accessors():
    h = rasterize_history([BBox(2, 0, 1, 1)], 5, 3)
    assert h.at(2, 0) == 1 and h.at(0, 2) == 0
    assert h.as_float().dtype == np.float64
    assert h == HistoryMap(5, 3, h.counts.copy())


def test_clip_box_examples():
    assert clip_box(BBox(1, 1, 2, 2), 10, 10) == BBox(1, 1, 2, 2)
    assert clip_box(BBox(-2, -2, 4, 4), 10, 10) == BBox(0, 0, 2, 2)
    assert clip_box(BBox(20, 20, 2, 2), 10, 10) is None


def test_flip_mirrors_history(rng):
    boxes = random_boxes(rng, 10, lo=-5, hi=60)
    h = rasterize_history(boxes, 64, 64).counts
    hf = rasterize_history(flip_boxes(boxes, 64), 64, 64).counts
    assert np.array_equal(hf, h[:, ::-1])
