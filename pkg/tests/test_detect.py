import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import assign_reference, center_to_corner, corner_iou, nms_reference, pixel_iou
from pageforge.backbone import PyramidFeatures
from pageforge.detect import (
    IGNORE,
    NEGATIVE,
    Anchor,
    Box,
    BoxDelta,
    ClassTargets,
    DetectHead,
    Detection,
    anchor_shapes,
    assign_targets,
    cls_loss,
    decode,
    decode_arrays,
    encode,
    encode_arrays,
    gen_anchors,
    iou,
    iou_matrix,
    nms,
    nms_indices,
    postprocess,
    reg_loss,
)
from pageforge.tensor import Parameter, Tensor, no_grad


def _random_boxes(rng, n, lo=4.0, hi=60.0, extent=200.0):
    wh = rng.uniform(lo, hi, size=(n, 2))
    xy = rng.uniform(0, extent, size=(n, 2))
    return np.concatenate([xy, wh], axis=1)


def test_base_anchor_is_32_square():
    shapes = anchor_shapes(32)
    assert any(np.allclose(s, [32, 32]) for s in shapes)


def test_tall_anchor_preserves_area():
    w, h = anchor_shapes(32, ratios=(2.0,), scales=(1.0,))[0]
    assert w == pytest.approx(22.627, abs=1e-3)
    assert h == pytest.approx(45.255, abs=1e-3)
    assert w * h == pytest.approx(1024)


def test_anchor_count_per_level():
    shapes = [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
    a = gen_anchors(shapes)
    assert a.per_point == 9
    assert (a.levels == 0).sum() == 32 * 32 * 9
    assert len(a.boxes) == 9 * sum(h * w for h, w in shapes)


def test_empty_level_rejected():
    with pytest.raises(ValueError):
        gen_anchors([(4, 4), (0, 2), (1, 1), (1, 1), (1, 1)])


def test_lattice_covers_every_pixel_centre():
    a = gen_anchors([(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)])
    c = np.array([center_to_corner(b) for b in a.boxes[a.levels == 0]])
    ys, xs = np.mgrid[0:64, 0:64] + 0.5
    pts = np.stack([xs.ravel(), ys.ravel()], 1)
    inside = ((pts[:, None, 0] >= c[None, :, 0]) & (pts[:, None, 0] <= c[None, :, 2])
              & (pts[:, None, 1] >= c[None, :, 1]) & (pts[:, None, 1] <= c[None, :, 3]))
    assert inside.any(axis=1).all()


def test_iou_examples():
    a = Box(10, 10, 20, 20)
    assert iou(a, a) == 1.0
    assert iou(a, Box(100, 100, 5, 5)) == 0.0
    # corner+size (0,0,10,10) and (5,0,10,10)
    assert iou(Box(5, 5, 10, 10), Box(10, 5, 10, 10)) == pytest.approx(1 / 3)


def test_iou_matches_pixel_counting():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = np.sort(rng.integers(0, 64, size=(2, 2, 2)), axis=1)  # [box, (lo, hi), (x, y)]
        if np.any(c[:, 1] == c[:, 0]):
            continue
        a = (c[0, 0, 0], c[0, 0, 1], c[0, 1, 0], c[0, 1, 1])
        b = (c[1, 0, 0], c[1, 0, 1], c[1, 1, 0], c[1, 1, 1])
        ca = np.array([[(a[0] + a[2]) / 2, (a[1] + a[3]) / 2, a[2] - a[0], a[3] - a[1]]])
        cb = np.array([[(b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1]]])
        assert abs(iou_matrix(ca, cb)[0, 0] - pixel_iou(a, b)) < 1e-6


def test_box_rejects_non_positive_size():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 3)


def test_corner_round_trip():
    b = Box(12.5, 7.25, 3.5, 9.0)
    assert Box.from_corners(*b.corners()) == b


def test_decode_substitution():
    box = decode(BoxDelta(0.1, 0.2, math.log(2), 0.0), Anchor(10, 20, 30, 40, 0))
    assert (box.x, box.y, box.w, box.h) == pytest.approx((13, 28, 60, 40))


def test_zero_delta_is_anchor():
    box = decode(BoxDelta(0, 0, 0, 0), Anchor(5, 6, 7, 8, 1))
    assert (box.x, box.y, box.w, box.h) == (5, 6, 7, 8)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    gt = _random_boxes(rng, 500)
    an = _random_boxes(rng, 500)
    assert np.abs(decode_arrays(encode_arrays(gt, an), an) - gt).max() < 1e-5
    d = rng.uniform(-1, 1, size=(500, 4))
    assert np.abs(encode_arrays(decode_arrays(d, an), an) - d).max() < 1e-9


def test_encode_rejects_degenerate_gt():
    with pytest.raises(ValueError):
        encode_arrays(np.array([[1.0, 1.0, 0.0, 2.0]]), np.array([[1.0, 1.0, 2.0, 2.0]]))


def test_identical_anchor_is_positive_with_zero_delta():
    anchors = np.array([[50.0, 50.0, 32.0, 32.0], [150.0, 150.0, 32.0, 32.0]])
    t, d = assign_targets(anchors, [[50.0, 50.0, 32.0, 32.0]], [0])
    assert list(t.labels) == [0, NEGATIVE]
    np.testing.assert_allclose(d, 0, atol=1e-12)


def test_low_overlap_anchor_is_negative():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0], [100.0, 100.0, 10.0, 10.0]])
    gt = np.array([[100.0, 100.0, 10.0, 10.0]])
    t, _ = assign_targets(anchors, gt, [0])
    assert t.labels[0] == NEGATIVE


def test_empty_gt_all_negative():
    t, d = assign_targets(np.array([[1.0, 1.0, 2.0, 2.0]] * 3), np.zeros((0, 4)), [])
    assert (t.labels == NEGATIVE).all()
    assert d.shape == (0, 4)


def test_assignment_matches_rule_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        anchors = _random_boxes(rng, 60, 10, 50, 120)
        gt = _random_boxes(rng, int(rng.integers(1, 5)), 10, 50, 120)
        t, _ = assign_targets(anchors, gt, np.zeros(len(gt), dtype=int))
        labels, matched = assign_reference(anchors, gt)
        mapped = [1 if l >= 0 else (0 if l == NEGATIVE else -1) for l in t.labels]
        assert mapped == labels
        assert list(t.matched) == matched


def test_translation_covariance():
    a = gen_anchors([(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)])
    gt = np.array([[60.0, 52.0, 40.0, 20.0]])
    t1, _ = assign_targets(a, gt, [0])
    t2, _ = assign_targets(a, gt + [8, 0, 0, 0], [0])
    p1 = a.boxes[t1.positives]
    p2 = a.boxes[t2.positives]
    np.testing.assert_allclose(np.sort(p1[:, 0] + 8), np.sort(p2[:, 0]))


def test_cls_loss_values():
    t = ClassTargets(np.array([0]), np.array([0]), 1)
    assert float(cls_loss(Tensor(np.array([[1.0]])), t).data) == pytest.approx(0, abs=1e-6)
    assert float(cls_loss(Tensor(np.array([[0.5]])), t).data) == pytest.approx(math.log(2), rel=1e-6)


def test_cls_loss_hand_sum():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.05, 0.95, size=(6, 2))
    labels = np.array([0, 1, NEGATIVE, IGNORE, NEGATIVE, 1])
    t = ClassTargets(labels, np.zeros(6, dtype=int), 2)
    n_pos, n_valid = 3, 5
    ref = 0.0
    for i, l in enumerate(labels):
        if l == IGNORE:
            continue
        for c in range(2):
            y = 1.0 if l == c else 0.0
            ce = -(y * math.log(p[i, c]) + (1 - y) * math.log(1 - p[i, c]))
            ref += ce / (n_pos if l >= 0 else n_valid)
    with __import__("pageforge.tensor", fromlist=["precision"]).precision(np.float64):
        got = float(cls_loss(Tensor(p), t).data)
    assert got == pytest.approx(ref, rel=1e-10)


def test_ignored_anchors_have_no_gradient():
    p = Parameter(np.full((3, 1), 0.3))
    t = ClassTargets(np.array([0, IGNORE, NEGATIVE]), np.array([0, -1, -1]), 1)
    cls_loss(p, t).backward()
    assert p.grad[1, 0] == 0


def test_reg_loss_values():
    assert float(reg_loss(Tensor(np.zeros((2, 4))), np.zeros((2, 4))).data) == 0
    assert float(reg_loss(Tensor(np.zeros((1, 4))), np.array([[1.0, 0, 0, 0]])).data) == pytest.approx(0.25)
    assert float(reg_loss(Tensor(np.zeros((0, 4))), np.zeros((0, 4))).data) == 0
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert float(reg_loss(Tensor(a), b).data) == pytest.approx(((a - b) ** 2).mean(), rel=1e-5)


def test_nms_examples():
    one = [Detection(Box(5, 5, 4, 4), 0.9, 0)]
    assert nms(one) == one
    two = [Detection(Box(5, 5, 4, 4), 0.8, 0, index=0), Detection(Box(5, 5, 4, 4), 0.9, 0, index=1)]
    assert [d.score for d in nms(two)] == [0.9]


def test_nms_tie_keeps_lower_anchor_index():
    dets = [Detection(Box(5, 5, 4, 4), 0.9, 0, index=7), Detection(Box(5, 5, 4, 4), 0.9, 0, index=3)]
    assert nms(dets)[0].index == 3


def test_nms_matches_reference_and_is_idempotent():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 50))
        boxes = _random_boxes(rng, n, 5, 40, 100)
        scores = np.round(rng.uniform(0, 1, n), 2)  # rounding creates ties
        keep = nms_indices(boxes, scores, 0.2)
        assert list(keep) == nms_reference(boxes, scores, 0.2)
        again = nms_indices(boxes[keep], scores[keep], 0.2)
        assert list(again) == list(range(len(keep)))
        kb = boxes[keep]
        m = iou_matrix(kb, kb)
        np.fill_diagonal(m, 0)
        assert (m <= 0.2 + 1e-12).all()


def test_postprocess_one_hot_anchor():
    a = gen_anchors([(4, 4), (2, 2), (1, 1), (1, 1), (1, 1)])
    probs = np.full((len(a.boxes), 1), 0.01)
    probs[17] = 0.97
    deltas = np.zeros((len(a.boxes), 4))
    deltas[17] = [0.1, 0.0, 0.2, 0.0]
    dets = postprocess(probs, deltas, a)
    assert len(dets) == 1
    expect = decode_arrays(deltas[17:18], a.boxes[17:18])[0]
    np.testing.assert_allclose(dets[0].box.as_array(), expect)
    assert dets[0].index == 17 and dets[0].score == pytest.approx(0.97)


def test_untrained_head_emits_nothing():
    rng = np.random.default_rng(0)
    head = DetectHead(rng, 4, 1, n_convs=1)
    maps = [Tensor(rng.normal(size=(1, 4, s, s))) for s in (8, 4, 2, 1, 1)]
    a = gen_anchors([(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)])
    with no_grad():
        probs, deltas = head(PyramidFeatures(maps))
    assert probs.shape == (len(a.boxes), 1)
    assert postprocess(probs.data, deltas.data, a) == []


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_decoded_boxes_positive(d):
    out = decode_arrays(np.array([d]), np.array([[10.0, 10.0, 8.0, 4.0]]))
    assert out[0, 2] > 0 and out[0, 3] > 0


def test_detection_json_uses_class_key():
    j = Detection(Box(1, 2, 3, 4), 0.5, 2, level=1).to_json()
    assert j["class"] == 2 and j["box"] == [1, 2, 3, 4] and j["level"] == 1


def test_corner_iou_oracle_agrees_on_random_pairs():
    rng = np.random.default_rng(6)
    a, b = _random_boxes(rng, 50), _random_boxes(rng, 50)
    m = iou_matrix(a, b)
    for i in range(50):
        assert abs(m[i, i] - corner_iou(center_to_corner(a[i]), center_to_corner(b[i]))) < 1e-12
