"""Anchors, box coding, target assignment, detection losses, NMS and the head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import PYRAMID_STRIDES, PyramidFeatures
from .tensor import (
    Conv2d,
    Module,
    Tensor,
    binary_cross_entropy,
    concat,
    relu,
    reshape,
    sigmoid,
    square,
    take_rows,
    transpose,
)

RATIOS = (0.5, 1.0, 2.0)
SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
PRIOR_PROB = 0.01

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Anchor:
    X: float
    Y: float
    W: float
    H: float
    level: int = 0


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float


@dataclass
class Detection:
    box: Box
    score: float
    cls: int
    level: int = 0
    index: int = -1  # position in the anchor lattice; breaks NMS ties

    def to_json(self) -> dict:
        b = self.box
        return {"box": [b.x, b.y, b.w, b.h], "score": self.score, "class": self.cls, "level": self.level}


@dataclass
class AnchorSet:
    boxes: np.ndarray  # [M, 4] center form
    levels: np.ndarray  # [M]
    offsets: list  # start index of each level
    per_point: int

    def __len__(self) -> int:
        return len(self.boxes)

    def level_slice(self, level: int) -> slice:
        end = self.offsets[level + 1] if level + 1 < len(self.offsets) else len(self.boxes)
        return slice(self.offsets[level], end)

    def anchor(self, i: int) -> Anchor:
        X, Y, W, H = self.boxes[i]
        return Anchor(X, Y, W, H, int(self.levels[i]))


# -- box arithmetic -----------------------------------------------------------

def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def to_center(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of center-form boxes, [len(a), len(b)]."""
    a = to_corners(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = to_corners(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def encode_arrays(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("cannot encode a box with non-positive width or height")
    return np.stack([
        (gt[..., 0] - anchors[..., 0]) / anchors[..., 2],
        (gt[..., 1] - anchors[..., 1]) / anchors[..., 3],
        np.log(gt[..., 2] / anchors[..., 2]),
        np.log(gt[..., 3] / anchors[..., 3]),
    ], axis=-1)


def decode_arrays(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    return np.stack([
        a[..., 0] + d[..., 0] * a[..., 2],
        a[..., 1] + d[..., 1] * a[..., 3],
        np.exp(d[..., 2]) * a[..., 2],
        np.exp(d[..., 3]) * a[..., 3],
    ], axis=-1)


def encode(gt: Box, anchor: Anchor) -> BoxDelta:
    d = encode_arrays(gt.as_array(), np.array([anchor.X, anchor.Y, anchor.W, anchor.H]))
    return BoxDelta(*map(float, d))


def decode(delta: BoxDelta, anchor: Anchor) -> Box:
    b = decode_arrays(np.array([delta.dx, delta.dy, delta.dw, delta.dh]),
                      np.array([anchor.X, anchor.Y, anchor.W, anchor.H]))
    return Box(*map(float, b))


# -- anchors -----------------------------------------------------------------

def anchor_shapes(base: float, ratios=RATIOS, scales=SCALES) -> np.ndarray:
    """(W, H) per anchor; ratio is H/W and area base*scale squared is preserved."""
    out = []
    for r in ratios:
        for s in scales:
            out.append((base * s * math.sqrt(1 / r), base * s * math.sqrt(r)))
    return np.array(out)


def gen_anchors(level_shapes, strides=PYRAMID_STRIDES, base: float = 32, ratios=RATIOS, scales=SCALES) -> AnchorSet:
    """Anchors ordered (level, row, column, shape); base size grows with stride / 8."""
    if len(level_shapes) != len(strides):
        raise ValueError("one stride per pyramid level required")
    boxes, levels, offsets = [], [], []
    total = 0
    for lvl, ((h, w), stride) in enumerate(zip(level_shapes, strides)):
        if h <= 0 or w <= 0:
            raise ValueError(f"pyramid level {lvl} is empty ({h}x{w})")
        shapes = anchor_shapes(base * stride / 8, ratios, scales)
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        n = h * w * len(shapes)
        b = np.empty((h, w, len(shapes), 4))
        b[..., 0] = cx[..., None]
        b[..., 1] = cy[..., None]
        b[..., 2] = shapes[:, 0]
        b[..., 3] = shapes[:, 1]
        boxes.append(b.reshape(n, 4))
        levels.append(np.full(n, lvl))
        offsets.append(total)
        total += n
    return AnchorSet(np.concatenate(boxes), np.concatenate(levels), offsets, len(ratios) * len(scales))


# -- targets and losses --------------------------------------------------------

@dataclass
class ClassTargets:
    labels: np.ndarray  # per anchor: class index, NEGATIVE or IGNORE
    matched: np.ndarray  # per anchor: GT index or -1
    n_classes: int

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def one_hot(self) -> np.ndarray:
        y = np.zeros((len(self.labels), self.n_classes))
        pos = self.positives
        y[pos, self.labels[pos]] = 1.0
        return y


def assign_targets(anchors: AnchorSet | np.ndarray, gt_boxes, gt_classes, n_classes: int = 1,
                   pos_thresh: float = 0.5, neg_thresh: float = 0.4):
    """Label anchors and compute regression targets for the positives.

    Returns (ClassTargets, deltas[len(positives), 4]).
    """
    A = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    M = len(A)
    labels = np.full(M, NEGATIVE, dtype=np.int64)
    matched = np.full(M, -1, dtype=np.int64)
    if len(gt_boxes):
        ious = iou_matrix(A, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(M), best_gt]
        labels[(best_iou >= neg_thresh) & (best_iou < pos_thresh)] = IGNORE
        pos = best_iou >= pos_thresh
        matched[pos] = best_gt[pos]
        for g in range(len(gt_boxes)):
            if not np.any(matched == g):
                a = int(ious[:, g].argmax())
                matched[a] = g
        has = matched >= 0
        labels[has] = gt_classes[matched[has]]
    targets = ClassTargets(labels, matched, n_classes)
    pos = targets.positives
    deltas = encode_arrays(gt_boxes[matched[pos]], A[pos]) if len(pos) else np.zeros((0, 4))
    return targets, deltas


def cls_loss(p_cl: Tensor, targets: ClassTargets) -> Tensor:
    """Binary cross-entropy summed over classes.

    Negative-anchor terms are averaged over all non-ignored anchors and the
    positive-anchor terms over max(1, #positives).
    """
    labels = targets.labels
    n_pos = int((labels >= 0).sum())
    n_valid = int((labels != IGNORE).sum())
    w = np.zeros(len(labels))
    w[labels == NEGATIVE] = 1.0 / max(n_valid, 1)
    w[labels >= 0] = 1.0 / max(n_pos, 1)
    y = targets.one_hot().astype(p_cl.data.dtype)
    return binary_cross_entropy(p_cl, y, w[:, None].astype(p_cl.data.dtype))


def reg_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared offset error over the positive rows (zero when there are none)."""
    if pred.shape[0] == 0:
        return Tensor(0.0)
    return square(pred - Tensor(np.asarray(target, dtype=pred.data.dtype))).mean()


# -- suppression ---------------------------------------------------------------

def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.2) -> np.ndarray:
    """Greedy suppression; stable sort so equal scores keep the lower index first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    c = to_corners(boxes)
    area = boxes[:, 2] * boxes[:, 3]
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        x1 = np.maximum(c[i, 0], c[rest, 0])
        y1 = np.maximum(c[i, 1], c[rest, 1])
        x2 = np.minimum(c[i, 2], c[rest, 2])
        y2 = np.minimum(c[i, 3], c[rest, 3])
        inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
        ov = inter / (area[i] + area[rest] - inter)
        order = rest[ov <= iou_thresh]
    return np.array(keep, dtype=np.int64)


def nms(dets: list[Detection], iou_thresh: float = 0.2) -> list[Detection]:
    if not dets:
        return []
    idx = np.array([d.index if d.index >= 0 else i for i, d in enumerate(dets)])
    # order by (-score, anchor index) before the stable greedy pass
    pre = np.lexsort((idx, -np.array([d.score for d in dets])))
    ordered = [dets[i] for i in pre]
    keep = nms_indices(np.array([d.box.as_array() for d in ordered]), np.array([d.score for d in ordered]),
                       iou_thresh)
    return [ordered[i] for i in keep]


def postprocess(probs: np.ndarray, deltas: np.ndarray, anchors: AnchorSet, score_thresh: float = 0.5,
                nms_thresh: float = 0.2, image_size: tuple | None = None, pre_nms_top: int = 1000) -> list[Detection]:
    """Score filter, decode, clip to the page and suppress."""
    scores = probs.max(axis=1)
    classes = probs.argmax(axis=1)
    cand = np.flatnonzero(scores >= score_thresh)
    if cand.size == 0:
        return []
    if cand.size > pre_nms_top:
        cand = cand[np.argsort(-scores[cand], kind="stable")[:pre_nms_top]]
        cand.sort()
    boxes = decode_arrays(np.clip(deltas[cand], -4.0, 4.0), anchors.boxes[cand])
    if image_size is not None:
        H, W = image_size
        c = to_corners(boxes)
        c[:, [0, 2]] = np.clip(c[:, [0, 2]], 0, W)
        c[:, [1, 3]] = np.clip(c[:, [1, 3]], 0, H)
        boxes = to_center(c)
    ok = (boxes[:, 2] > 1e-3) & (boxes[:, 3] > 1e-3)
    cand, boxes = cand[ok], boxes[ok]
    keep = nms_indices(boxes, scores[cand], nms_thresh)
    return [Detection(Box(*map(float, boxes[k])), float(scores[cand[k]]), int(classes[cand[k]]),
                      int(anchors.levels[cand[k]]), int(cand[k])) for k in keep]


# -- network head --------------------------------------------------------------

class DetectHead(Module):
    """Classification and regression towers shared across pyramid levels."""

    def __init__(self, rng, channels: int, n_classes: int, n_convs: int = 2, head_channels: int | None = None,
                 per_point: int = 9):
        hc = head_channels or channels
        self.n_classes = n_classes
        self.per_point = per_point
        self.cls_tower = [Conv2d(rng, channels if i == 0 else hc, hc, 3) for i in range(n_convs)]
        self.reg_tower = [Conv2d(rng, channels if i == 0 else hc, hc, 3) for i in range(n_convs)]
        self.cls_out = Conv2d(rng, hc, per_point * n_classes, 3)
        self.reg_out = Conv2d(rng, hc, per_point * 4, 3)
        self.cls_out.weight.data *= 0.1
        self.reg_out.weight.data *= 0.1
        self.cls_out.bias.data[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)

    def __call__(self, features: PyramidFeatures) -> tuple[Tensor, Tensor]:
        """Returns (probabilities [M, n_classes], deltas [M, 4]) in anchor order."""
        probs, deltas = [], []
        for f in features.maps:
            c = f
            for conv in self.cls_tower:
                c = relu(conv(c))
            r = f
            for conv in self.reg_tower:
                r = relu(conv(r))
            c = self.cls_out(c)
            r = self.reg_out(r)
            h, w = f.shape[2:]
            probs.append(reshape(transpose(c, (0, 2, 3, 1)), (h * w * self.per_point, self.n_classes)))
            deltas.append(reshape(transpose(r, (0, 2, 3, 1)), (h * w * self.per_point, 4)))
        return sigmoid(concat(probs, 0)), concat(deltas, 0)


def detection_losses(probs: Tensor, deltas: Tensor, anchors: AnchorSet, gt_boxes, gt_classes) -> tuple:
    targets, target_deltas = assign_targets(anchors, gt_boxes, gt_classes, probs.shape[1])
    lc = cls_loss(probs, targets)
    lr = reg_loss(take_rows(deltas, targets.positives), target_deltas)
    return lc, lr, targets


def detect(head: DetectHead, features: PyramidFeatures, anchors: AnchorSet, score_thresh: float = 0.5,
           nms_thresh: float = 0.2, image_size: tuple | None = None) -> list[Detection]:
    probs, deltas = head(features)
    return postprocess(probs.data, deltas.data, anchors, score_thresh, nms_thresh, image_size)
