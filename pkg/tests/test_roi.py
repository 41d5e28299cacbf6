import numpy as np
import pytest

from pageforge.roi import pool, roi_pool
from pageforge.tensor import Parameter, Tensor, grad_check, precision, tsum


def _brute_pool(fmap, box, pH, pW, stride):
    """Per-bin max written with explicit loops over the same floor/ceil bin edges."""
    C, Hf, Wf = fmap.shape
    x1, y1 = (box[0] - box[2] / 2) / stride, (box[1] - box[3] / 2) / stride
    x2, y2 = (box[0] + box[2] / 2) / stride, (box[1] + box[3] / 2) / stride
    out = np.zeros((C, pH, pW))
    for i in range(pH):
        ya = int(np.floor(y1 + (y2 - y1) * i / pH))
        yb = max(int(np.ceil(y1 + (y2 - y1) * (i + 1) / pH)), ya + 1)
        ya, yb = min(max(ya, 0), Hf - 1), min(max(yb, min(max(ya, 0), Hf - 1) + 1), Hf)
        for j in range(pW):
            xa = int(np.floor(x1 + (x2 - x1) * j / pW))
            xb = max(int(np.ceil(x1 + (x2 - x1) * (j + 1) / pW)), xa + 1)
            xa, xb = min(max(xa, 0), Wf - 1), min(max(xb, min(max(xa, 0), Wf - 1) + 1), Wf)
            out[:, i, j] = fmap[:, ya:yb, xa:xb].reshape(C, -1).max(axis=1)
    return out


def test_exact_partition_returns_crop():
    fmap = np.arange(2 * 10 * 40, dtype=float).reshape(1, 2, 10, 40)
    # box covering feature cells rows 1..8, cols 4..35 exactly (8 x 32 cells)
    box = [(4 + 16) * 8, (1 + 4) * 8, 32 * 8, 8 * 8]
    with precision(np.float64):
        out = roi_pool(Tensor(fmap), [box]).tensor.data[0]
    np.testing.assert_array_equal(out, fmap[0, :, 1:9, 4:36])


def test_constant_map_gives_constant_output():
    out = roi_pool(Tensor(np.full((1, 3, 6, 6), 2.5)), [[20, 20, 13, 7], [5, 5, 2, 2]], 4, 4).tensor.data
    assert np.all(out == 2.5)


def test_forward_matches_brute_force():
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=(1, 3, 9, 13))
    for _ in range(50):
        w, h = rng.uniform(2, 90), rng.uniform(2, 60)
        box = [rng.uniform(0, 104), rng.uniform(0, 72), w, h]
        with precision(np.float64):
            got = roi_pool(Tensor(fmap), [box], 3, 5, 8).tensor.data[0]
        np.testing.assert_array_equal(got, _brute_pool(fmap[0], box, 3, 5, 8))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        fmap = Parameter(rng.normal(size=(1, 2, 6, 8)))
        boxes = [[20, 16, 30, 14], [40, 30, 20, 20], [24, 20, 28, 16]]  # overlapping boxes accumulate
        assert grad_check(lambda: tsum(roi_pool(fmap, boxes, 2, 4).tensor), [fmap]) < 1e-6


def test_gradient_sparsity():
    rng = np.random.default_rng(2)
    fmap = Parameter(rng.normal(size=(1, 2, 8, 8)))
    tsum(roi_pool(fmap, [[32, 32, 40, 40]], 2, 4).tensor).backward()
    assert np.count_nonzero(fmap.grad) <= 2 * 2 * 4


def test_monotone_in_source():
    rng = np.random.default_rng(3)
    fmap = rng.normal(size=(1, 2, 8, 8))
    boxes = [[30, 30, 40, 25]]
    base = roi_pool(Tensor(fmap), boxes, 2, 4).tensor.data
    bumped = fmap.copy()
    bumped[0, :, 3, 4] += 1.0
    assert np.all(roi_pool(Tensor(bumped), boxes, 2, 4).tensor.data >= base)


def test_sub_cell_box_replicates_nearest_cell():
    fmap = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = roi_pool(Tensor(fmap), [[13, 13, 2, 2]], 2, 2).tensor.data
    assert np.all(out == fmap[0, 0, 1, 1])


def test_box_outside_page_rejected_with_index():
    with pytest.raises(ValueError, match="box 1"):
        roi_pool(Tensor(np.zeros((1, 1, 4, 4))), [[8, 8, 4, 4], [100, 100, 4, 4]])


def test_pool_returns_pooled_features():
    feats = pool(Tensor(np.ones((1, 2, 4, 8))), [[16, 16, 16, 8]], 2, 4)
    assert len(feats) == 1
    assert feats[0].tensor.shape == (2, 2, 4)
    assert feats[0].argmax.shape == (2, 2, 4)
