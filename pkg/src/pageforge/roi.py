"""Max RoI pooling from the finest pyramid level with argmax gradient routing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _result


@dataclass
class PooledFeature:
    tensor: np.ndarray  # [C, pH, pW]
    source_box: np.ndarray  # center form, image pixels
    argmax: np.ndarray  # [C, pH, pW] flat indices into the source map


@dataclass
class PooledBatch:
    tensor: Tensor  # [B, C, pH, pW]
    boxes: np.ndarray
    argmax: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i: int) -> PooledFeature:
        return PooledFeature(self.tensor.data[i], self.boxes[i], self.argmax[i])


def _bin_ranges(lo: np.ndarray, hi: np.ndarray, n_bins: int, limit: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell ranges [start, end) per box and bin along one axis, at least one cell wide."""
    step = (hi - lo) / n_bins
    edges = lo[:, None] + step[:, None] * np.arange(n_bins + 1)[None, :]
    start = np.floor(edges[:, :-1]).astype(np.int64)
    end = np.ceil(edges[:, 1:]).astype(np.int64)
    end = np.maximum(end, start + 1)
    start = np.clip(start, 0, limit - 1)
    end = np.clip(end, start + 1, limit)
    return start, end


def roi_pool(features: Tensor, boxes, pH: int = 8, pW: int = 32, stride: int = 8) -> PooledBatch:
    """Pool each center-form box (image pixels) to a [C, pH, pW] grid by per-bin max."""
    if features.ndim != 4 or features.shape[0] != 1:
        raise ValueError(f"expected a single [1, C, H, W] feature map, got {features.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    _, C, Hf, Wf = features.shape
    H, W = Hf * stride, Wf * stride
    x1 = boxes[:, 0] - boxes[:, 2] / 2
    y1 = boxes[:, 1] - boxes[:, 3] / 2
    x2 = boxes[:, 0] + boxes[:, 2] / 2
    y2 = boxes[:, 1] + boxes[:, 3] / 2
    outside = (x2 <= 0) | (y2 <= 0) | (x1 >= W) | (y1 >= H)
    if outside.any():
        raise ValueError(f"box {int(np.flatnonzero(outside)[0])} lies entirely outside the {H}x{W} page")
    B = len(boxes)
    fmap = features.data[0].reshape(C, Hf * Wf)
    if B == 0:
        empty = np.zeros((0, C, pH, pW), dtype=features.data.dtype)
        return PooledBatch(Tensor(empty), boxes, np.zeros((0, C, pH, pW), dtype=np.int64))

    ys, ye = _bin_ranges(y1 / stride, y2 / stride, pH, Hf)
    xs, xe = _bin_ranges(x1 / stride, x2 / stride, pW, Wf)
    kh = int((ye - ys).max())
    kw = int((xe - xs).max())
    # candidate cells per bin; out-of-range offsets repeat the last valid cell, which leaves the max unchanged
    rows = np.minimum(ys[:, :, None] + np.arange(kh), ye[:, :, None] - 1)  # [B, pH, kh]
    cols = np.minimum(xs[:, :, None] + np.arange(kw), xe[:, :, None] - 1)  # [B, pW, kw]
    flat = rows[:, :, None, :, None] * Wf + cols[:, None, :, None, :]  # [B, pH, pW, kh, kw]
    flat = flat.reshape(B, pH, pW, kh * kw)
    vals = fmap[:, flat]  # [C, B, pH, pW, K]
    best = vals.argmax(axis=-1)
    out = np.take_along_axis(vals, best[..., None], axis=-1)[..., 0]
    src = np.take_along_axis(np.broadcast_to(flat, vals.shape), best[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    src = np.ascontiguousarray(src.transpose(1, 0, 2, 3))  # [B, C, pH, pW]
    chan = np.broadcast_to(np.arange(C)[None, :, None, None], src.shape)

    def factory(res):
        def _backward():
            g = np.zeros((C, Hf * Wf), dtype=features.data.dtype)
            np.add.at(g, (chan, src), res.grad)
            features._accum(g.reshape(1, C, Hf, Wf))
        return _backward

    return PooledBatch(_result(out, (features,), "roi_pool", factory), boxes, src)


def pool(features_p3: Tensor, boxes, pH: int = 8, pW: int = 32, stride: int = 8) -> list[PooledFeature]:
    batch = roi_pool(features_p3, boxes, pH, pW, stride)
    return [batch[i] for i in range(len(batch))]
