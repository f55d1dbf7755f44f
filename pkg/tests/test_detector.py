import math

import numpy as np
import pytest

from iterdet import detector as det
from iterdet import nn
from iterdet.geometry import BBox, HistoryMap, rasterize_history
from iterdet.synthetic import SceneSpec, generate_scene, scene_rng

CFG = det.DetectorConfig()


@pytest.fixture
def params():
    return det.init_params(CFG, np.random.default_rng(0))


def randomized(params, rng, scale=0.1):
    """A generic parameter point: nonzero biases and history weights."""
    p = params.copy()
    for arr in p.tensors().values():
        arr += rng.normal(0.0, scale, size=arr.shape)
    return p


def test_config_validation_and_round_trip():
    assert det.DetectorConfig.from_dict(CFG.to_dict()) == CFG
    with pytest.raises(ValueError, match="unknown"):
        det.DetectorConfig.from_dict({"depth": 2})
    with pytest.raises(ValueError):
        det.DetectorConfig(history_stride=1)
    with pytest.raises(ValueError):
        det.DetectorConfig(stem_kernel=4)
    with pytest.raises(ValueError):
        det.DetectorConfig(head_stride=6)
    with pytest.raises(ValueError):
        det.DetectorConfig(head_stride=32, trunk_depth=2)
    assert CFG.trunk_strides == [2, 1, 1]


def test_init(params):
    assert not params.history_stem.weights.any() and not params.history_stem.bias.any()
    prior = 1.0 / (1.0 + math.exp(-params.score_head.bias[0]))
    assert prior == pytest.approx(CFG.prior_prob)
    a = det.init_params(CFG, np.random.default_rng(0)).tensors()
    assert all(np.array_equal(a[k], v) for k, v in params.tensors().items())


def test_forward_shapes(params, rng):
    out = det.forward(rng.uniform(size=(3, 64, 48)), None, params)
    assert out.score_logits.shape == (1, 16, 12)
    assert out.box_distances.shape == (4, 16, 12)
    with pytest.raises(nn.ShapeError):
        det.forward(rng.uniform(size=(1, 64, 64)), None, params)
    with pytest.raises(nn.ShapeError):
        det.forward(rng.uniform(size=(3, 64, 64)), np.zeros((32, 32)), params)


def test_zero_history_branch_is_inert_at_init(params, rng):
    image = rng.uniform(size=(3, 32, 32))
    hist = rasterize_history([BBox(2, 3, 10, 12), BBox(5, 5, 20, 4)], 32, 32)
    a = det.forward(image, None, params)
    b = det.forward(image, hist, params)
    assert np.array_equal(a.score_logits, b.score_logits)
    assert np.array_equal(a.box_distances, b.box_distances)


def test_history_changes_output_once_trained(params, rng):
    p = randomized(params, rng)
    image = rng.uniform(size=(3, 32, 32))
    hist = rasterize_history([BBox(2, 3, 10, 12)], 32, 32)
    a = det.forward(image, np.zeros((32, 32)), p).score_logits
    b = det.forward(image, hist, p).score_logits
    assert not np.array_equal(a, b)
    # out-of-grid parts of history boxes cannot matter
    hist2 = rasterize_history([BBox(2, 3, 10, 12), BBox(40, 40, 5, 5)], 32, 32)
    assert np.array_equal(det.forward(image, hist2, p).score_logits, b)


def test_batched_forward_equals_single(params, rng):
    p = randomized(params, rng)
    images = rng.uniform(size=(3, 3, 32, 32))
    hists = rng.integers(0, 3, size=(3, 1, 32, 32)).astype(float)
    s, d, _ = det.forward_batch(images, hists, p)
    for i in range(3):
        out = det.forward(images[i], hists[i, 0], p)
        assert np.allclose(out.score_logits, s[i], atol=1e-12)
        assert np.allclose(out.box_distances, d[i], atol=1e-12)


def test_location_centers():
    cx, cy = det.location_centers(2, 3, 4)
    assert cx.tolist() == [1.5, 5.5, 9.5] and cy.tolist() == [1.5, 5.5]


def brute_assign(targets, oh, ow, stride):
    pos = np.zeros((oh, ow), dtype=bool)
    reg = np.zeros((4, oh, ow))
    for i in range(oh):
        for j in range(ow):
            px, py = j * stride + (stride - 1) / 2, i * stride + (stride - 1) / 2
            best = None
            for k, (x, y, w, h) in enumerate(targets):
                if x < px < x + w and y < py < y + h:
                    if best is None or w * h < targets[best][2] * targets[best][3]:
                        best = k
            if best is not None:
                x, y, w, h = targets[best]
                pos[i, j] = True
                reg[:, i, j] = [math.log(max(v, 0.5)) for v in (px - x, py - y, x + w - px,
                                                                  y + h - py)]
    return pos, reg


def test_assign_targets_matches_brute_force(rng):
    for _ in range(50):
        n = int(rng.integers(0, 6))
        t = np.concatenate([rng.uniform(-5, 60, (n, 2)), rng.uniform(1, 30, (n, 2))], axis=1)
        if n and rng.random() < 0.3:
            t[-1, 2:] = t[0, 2:]  # equal areas: lowest index wins
        pos, reg = det.assign_targets(t, 16, 16, 4)
        bpos, breg = brute_assign(t, 16, 16, 4)
        assert np.array_equal(pos, bpos)
        assert np.allclose(reg, breg, atol=1e-12)


def test_assign_targets_example():
    pos, reg = det.assign_targets(np.array([[0.0, 0.0, 8.0, 4.0]]), 2, 3, 4)
    assert pos.tolist() == [[True, True, False], [False, False, False]]
    assert np.allclose(np.exp(reg[:, 0, 1]), [5.5, 1.5, 2.5, 2.5])


def test_decode_example():
    logits = np.full((1, 2, 2), -10.0)
    logits[0, 1, 0] = 2.0
    logits[0, 0, 1] = 1.0
    dist = np.zeros((4, 2, 2))
    dist[:, 1, 0] = np.log([1.0, 2.0, 3.0, 4.0])
    out = det.DenseOutput(logits, dist)
    boxes = det.decode(out, CFG, iteration=2)
    assert len(boxes) == 2
    assert boxes[0].box == BBox(1.5 - 1.0, 5.5 - 2.0, 4.0, 6.0)
    assert boxes[0].score == pytest.approx(1 / (1 + math.exp(-2.0)))
    assert boxes[0].iteration == 2
    b, s = det.decode_arrays(out, CFG, score_threshold=0.9)
    assert len(s) == 0 and b.shape == (0, 4)


def test_decode_without_nms_is_sorted(params, rng):
    out = det.forward(rng.uniform(size=(3, 32, 32)), None, randomized(params, rng, 0.5))
    b, s = det.decode_arrays(out, CFG, score_threshold=0.0, nms_iou=False)
    assert len(s) == 64 and np.all(np.diff(s) <= 0)
    b2, s2 = det.decode_arrays(out, CFG, score_threshold=0.0)
    assert len(s2) <= len(s) and s2[0] == s[0]


def test_focal_loss_values_and_gradient():
    x = np.linspace(-6, 6, 25)
    for pos in (np.ones(25, bool), np.zeros(25, bool)):
        loss, grad = det.focal_loss(x, pos, 0.25, 2.0)
        p = 1 / (1 + np.exp(-x))
        ref = np.where(pos, -0.25 * (1 - p) ** 2 * np.log(p), -0.75 * p ** 2 * np.log(1 - p))
        assert np.allclose(loss, ref, rtol=1e-12)
        h = 1e-6
        num = (det.focal_loss(x + h, pos, 0.25, 2.0)[0] - det.focal_loss(x - h, pos, 0.25, 2.0)[0])
        assert np.allclose(grad, num / (2 * h), atol=1e-8)
    # gamma 0, alpha 0.5 is half the binary cross-entropy
    loss, _ = det.focal_loss(np.array([0.0]), np.array([True]), 0.5, 0.0)
    assert loss[0] == pytest.approx(0.5 * math.log(2))


def test_loss_batch_is_sum_over_examples(params, rng):
    p = randomized(params, rng)
    spec = SceneSpec(image_size=32, object_size_min=6, object_size_max=12, objects_max=6)
    scenes = [generate_scene(spec, scene_rng(1, i)) for i in range(2)]
    images = np.stack([s.image for s in scenes])
    hists = np.zeros((2, 1, 32, 32))
    targets = [np.array([b.as_tuple() for b in s.boxes]) for s in scenes]
    loss, grads = det.batch_loss_and_grads(images, hists, targets, p, CFG)
    n_pos = [det.assign_targets(t, 8, 8, 4)[0].sum() for t in targets]
    total = sum(det.loss_and_grads(s.image, np.zeros((32, 32)), s.boxes, p, CFG)[0] * max(n, 1)
                for s, n in zip(scenes, n_pos))
    assert loss == pytest.approx(total / sum(n_pos), rel=1e-12)
    assert set(grads) == set(p.tensors())


def test_loss_gradient_small_model(rng):
    cfg = det.DetectorConfig(stem_channels=3)
    p = randomized(det.init_params(cfg, rng), rng)
    spec = SceneSpec(image_size=32, object_size_min=6, object_size_max=12, objects_max=6)
    scene = generate_scene(spec, scene_rng(2, 0))
    hist = HistoryMap(32, 32, rasterize_history(scene.boxes[:2], 32, 32).counts)
    point = p.tensors()

    def f(_):
        return det.loss_and_grads(scene.image, hist, scene.boxes[2:], p, cfg)

    assert nn.grad_check(f, point, 1e-6) < 1e-4


def test_params_from_tensors(params):
    t = {k: v.copy() for k, v in params.tensors().items()}
    rebuilt = det.params_from_tensors(CFG, t)
    assert all(np.array_equal(rebuilt.tensors()[k], v) for k, v in t.items())
    del t["box_head.b"]
    with pytest.raises(ValueError, match="box_head.b"):
        det.params_from_tensors(CFG, t)
    with pytest.raises(ValueError):
        det.params_from_tensors(det.DetectorConfig(stem_channels=8), params.tensors())


def test_decode_analytic_examples():
    out = det.DenseOutput(np.full((1, 4, 4), -20.0), np.zeros((4, 4, 4)))
    assert det.decode(out, CFG) == []
    out.score_logits[0, 2, 1] = 20.0
    out.box_distances[:, 2, 1] = math.log(5.0)
    (b,) = det.decode(out, CFG)
    cx, cy = 1 * 4 + 1.5, 2 * 4 + 1.5
    assert np.allclose(b.box.as_tuple(), (cx - 5, cy - 5, 10, 10), atol=1e-12)
    assert b.score == pytest.approx(1.0)


def reference_decode(out, cfg):
    """Enumerate every location, keep those above threshold, then O(n^2) NMS."""
    from .conftest import reference_nms

    rows, scores = [], []
    _, h, w = out.score_logits.shape
    for i in range(h):
        for j in range(w):
            s = 1 / (1 + math.exp(-out.score_logits[0, i, j]))
            if s >= cfg.score_threshold:
                l, t, r, b = (math.exp(v) for v in out.box_distances[:, i, j])
                cx, cy = j * cfg.head_stride + 1.5, i * cfg.head_stride + 1.5
                rows.append((cx - l, cy - t, l + r, t + b))
                scores.append(s)
    keep = reference_nms(rows, scores, cfg.nms_iou)
    return [(rows[k], scores[k]) for k in keep]


def test_decode_matches_reference(rng):
    for _ in range(30):
        out = det.DenseOutput(rng.normal(-2, 2, size=(1, 6, 6)),
                              rng.normal(1.5, 0.5, size=(4, 6, 6)))
        got = det.decode(out, CFG)
        ref = reference_decode(out, CFG)
        assert len(got) == len(ref)
        for g, (r, s) in zip(got, ref):
            assert np.allclose(g.box.as_tuple(), r, atol=1e-9) and g.score == pytest.approx(s)


def test_confident_background_has_near_zero_loss(params, rng):
    p = params.copy()
    p.score_head.weights[:] = 0.0
    p.score_head.bias[:] = -20.0
    loss, _ = det.loss_and_grads(rng.uniform(size=(3, 32, 32)), np.zeros((32, 32)), [], p, CFG)
    assert 0.0 <= loss < 1e-15


def test_duplicate_targets_do_not_change_loss(params, rng):
    p = randomized(params, rng)
    image = rng.uniform(size=(3, 32, 32))
    targets = [BBox(2, 3, 12, 10), BBox(15, 12, 10, 14)]
    a = det.loss_and_grads(image, np.zeros((32, 32)), targets, p, CFG)[0]
    b = det.loss_and_grads(image, np.zeros((32, 32)), targets + targets[:1], p, CFG)[0]
    assert a == b


def test_forward_is_deterministic(params, rng):
    image = rng.uniform(size=(3, 32, 32))
    a = det.forward(image, None, params)
    b = det.forward(image.copy(), None, det.init_params(CFG, np.random.default_rng(0)))
    assert np.array_equal(a.score_logits, b.score_logits)


def test_two_object_scene_gradient_with_default_step(rng):
    # a 2-object 32x32 scene, one object in the history, full coordinate sweep of a small model
    cfg = det.DetectorConfig(stem_channels=2, trunk_depth=1)
    p = randomized(det.init_params(cfg, rng), rng)
    image = rng.uniform(size=(3, 32, 32))
    old, new = BBox(3, 4, 12, 12), BBox(10, 9, 14, 13)
    hist = rasterize_history([old], 32, 32)
    assert nn.grad_check(lambda _: det.loss_and_grads(image, hist, [new], p, cfg),
                         p.tensors(), 1e-5) < 1e-4


def test_loss_halves_within_100_steps():
    from iterdet import train as T

    spec = SceneSpec(image_size=32, object_size_min=6, object_size_max=12, objects_max=6)
    scenes = [generate_scene(spec, scene_rng(4, i)) for i in range(16)]
    cfg = det.DetectorConfig()
    state = T.new_state(cfg, T.TrainConfig(lr=1e-3, seed=0))
    fixed = T.make_batch(scenes, np.random.default_rng(0))
    losses = []
    for _ in range(100):
        loss, grads = det.batch_loss_and_grads(*fixed, state.params, cfg)
        nn.adam_step(state.params.tensors(), grads, state.optimizer)
        losses.append(loss)
    assert losses[-1] <= 0.5 * losses[0]
