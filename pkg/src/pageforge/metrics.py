"""Average precision, entity F1 and character error rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detect import iou_matrix


@dataclass
class MetricCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matches: list = field(default_factory=list)  # per detection, in input order: GT index or None
    scored: list = field(default_factory=list)  # (score, is_tp) per detection

    def merge(self, other: "MetricCounts") -> "MetricCounts":
        return MetricCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                            self.matches + other.matches, self.scored + other.scored)

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn}


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh: float = 0.5, det_tags=None, gt_tags=None,
                     other=None) -> MetricCounts:
    """Greedy matching in descending score order.

    With tags given (entity mode), detections and ground truth tagged ``other``
    are dropped first and a match also requires equal tags.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    tagged = det_tags is not None
    det_keep = np.arange(len(det_boxes))
    gt_keep = np.arange(len(gt_boxes))
    if tagged:
        det_tags = np.asarray(det_tags).reshape(-1)
        gt_tags = np.asarray(gt_tags).reshape(-1)
        if other is not None:
            det_keep = np.flatnonzero(det_tags != other)
            gt_keep = np.flatnonzero(gt_tags != other)
    ious = iou_matrix(det_boxes[det_keep], gt_boxes[gt_keep])
    taken = np.zeros(len(gt_keep), dtype=bool)
    matches: list = [None] * len(det_boxes)
    scored = []
    order = det_keep[np.argsort(-det_scores[det_keep], kind="stable")]
    pos_of = {d: i for i, d in enumerate(det_keep)}
    tp = 0
    for d in order:
        row = ious[pos_of[d]].copy()
        row[taken] = -1.0
        if tagged:
            row[gt_tags[gt_keep] != det_tags[d]] = -1.0
        hit = None
        if row.size and row.max() >= iou_thresh:
            g = int(row.argmax())
            taken[g] = True
            hit = int(gt_keep[g])
            tp += 1
        matches[d] = hit
        scored.append((float(det_scores[d]), hit is not None))
    return MetricCounts(tp, len(det_keep) - tp, len(gt_keep) - tp, matches, scored)


def average_precision(scored, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    if not scored:
        return 0.0
    scores = np.array([s for s, _ in scored])
    hits = np.array([h for _, h in scored], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    hits = hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * interp))


def precision_recall(counts: MetricCounts) -> tuple[float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return p, r


def f1(counts: MetricCounts) -> float:
    if counts.tp + counts.fp == 0 and counts.tp + counts.fn == 0:
        return 1.0
    p, r = precision_recall(counts)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class EditOps:
    i: int = 0
    s: int = 0
    d: int = 0

    @property
    def total(self) -> int:
        return self.i + self.s + self.d


def edit_ops(hyp: str, ref: str) -> EditOps:
    """Levenshtein alignment turning ``hyp`` into ``ref``, split by operation type."""
    n, m = len(hyp), len(ref)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for a in range(1, n + 1):
        for b in range(1, m + 1):
            D[a, b] = min(D[a - 1, b] + 1, D[a, b - 1] + 1, D[a - 1, b - 1] + (hyp[a - 1] != ref[b - 1]))
    ops = EditOps()
    a, b = n, m
    while a or b:
        if a and b and D[a, b] == D[a - 1, b - 1] + (hyp[a - 1] != ref[b - 1]):
            ops.s += hyp[a - 1] != ref[b - 1]
            a, b = a - 1, b - 1
        elif a and D[a, b] == D[a - 1, b] + 1:
            ops.d += 1  # hyp char removed
            a -= 1
        else:
            ops.i += 1  # ref char inserted
            b -= 1
    return ops


def cer(hypothesis: str, reference: str) -> float:
    if not reference:
        raise ValueError("CER needs a non-empty reference")
    return edit_ops(hypothesis, reference).total / len(reference)


def corpus_cer(pairs) -> float:
    """Total edit operations over total reference length."""
    pairs = list(pairs)
    ref_len = sum(len(r) for _, r in pairs)
    if ref_len == 0:
        raise ValueError("CER needs a non-empty reference")
    return sum(edit_ops(h, r).total for h, r in pairs) / ref_len
