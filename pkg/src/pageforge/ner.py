"""Entity tagging: reading order, the sequential tagger and the crop classifier baseline."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Conv1d,
    Conv2d,
    Linear,
    Module,
    Tensor,
    log_softmax,
    mean,
    pad_rows,
    relu,
    reshape,
    take_rows,
    transpose,
)

DEFAULT_TAGS = ("name", "location", "date", "occupation", "other")
warnings = Counter()


@dataclass(frozen=True)
class TagSet:
    tags: tuple = DEFAULT_TAGS

    def __post_init__(self):
        if list(self.tags).count("other") != 1:
            raise ValueError("tag set must contain 'other' exactly once")
        if len(set(self.tags)) != len(self.tags):
            raise ValueError("duplicate tags")

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)

    @property
    def other(self) -> int:
        return self.tags.index("other")


@dataclass
class ReadingOrder:
    order: list
    lines: list = field(default_factory=list)  # line number per box (indexed by box)


def reading_order(boxes) -> ReadingOrder:
    """Left-to-right, top-to-bottom ordering of center-form boxes.

    A line starts at the leftmost box level with the topmost unassigned box and
    grows rightwards: the next member is the nearest box to the right whose
    vertical center falls inside the vertical span of the line's last box.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(b)
    remaining = set(range(n))
    lines: list[list[int]] = []

    def within(i: int, j: int) -> bool:
        return abs(b[j, 1] - b[i, 1]) <= b[i, 3] / 2

    while remaining:
        top = min(remaining, key=lambda i: (b[i, 1] - b[i, 3] / 2, b[i, 0], i))
        seed = min((i for i in remaining if within(top, i)), key=lambda i: (b[i, 0], b[i, 1], i))
        line = [seed]
        remaining.discard(seed)
        while True:
            last = line[-1]
            nxt = [i for i in remaining if b[i, 0] > b[last, 0] and within(last, i)]
            if not nxt:
                break
            k = min(nxt, key=lambda i: (b[i, 0], b[i, 1], i))
            line.append(k)
            remaining.discard(k)
        lines.append(line)

    lines.sort(key=lambda l: (float(np.mean(b[l, 1])), b[l[0], 0], b[l[0], 1]))
    order = [i for l in lines for i in l]
    line_of = [0] * n
    for li, l in enumerate(lines):
        for i in l:
            line_of[i] = li
    return ReadingOrder(order, line_of)


def word_vectors(pooled: Tensor, groups: int = 4) -> Tensor:
    """[B, C, pH, pW] -> [B, C * groups]: height mean, then mean over column groups."""
    B, C, _, pW = pooled.shape
    x = mean(pooled, axis=2)
    x = reshape(x, (B, C, groups, pW // groups))
    return reshape(mean(x, axis=3), (B, C * groups))


class SeqTagger(Module):
    """Two kernel-3 convolutions along the reading sequence, then a per-step classifier."""

    def __init__(self, rng, in_channels: int, n_tags: int, hidden: int = 64, groups: int = 4, max_len: int = 64):
        self.groups = groups
        self.max_len = max_len
        self.conv1 = Conv1d(rng, in_channels * groups, hidden, 3)
        self.conv2 = Conv1d(rng, hidden, hidden, 3)
        self.fc = Linear(rng, hidden, n_tags)

    def __call__(self, pooled: Tensor, order: ReadingOrder | list) -> Tensor:
        """Log-probabilities [n, n_tags] for the boxes in reading order (truncated to max_len)."""
        idx = list(order.order if isinstance(order, ReadingOrder) else order)
        if not idx:
            raise ValueError("sequential tagging needs at least one box")
        if len(idx) > self.max_len:
            warnings["ner_truncated"] += 1
            idx = idx[: self.max_len]
        n = len(idx)
        seq = take_rows(word_vectors(pooled, self.groups), np.array(idx))
        seq = pad_rows(seq, self.max_len)  # zero features past the end
        x = reshape(transpose(seq, (1, 0)), (1, seq.shape[1], self.max_len))
        x = relu(self.conv1(x))
        x = relu(self.conv2(x))
        x = transpose(reshape(x, x.shape[1:]), (1, 0))
        logits = self.fc(take_rows(x, np.arange(n)))
        return log_softmax(logits, axis=-1)


def tag_sequential(tagger: SeqTagger, pooled: Tensor, order: ReadingOrder) -> Tensor:
    return tagger(pooled, order)


def tag_from_classification(detections) -> list[int]:
    return [d.cls for d in detections]


# -- context-free baseline ----------------------------------------------------

CROP_H, CROP_W = 32, 128


def crop_word(page: np.ndarray, box, height: int = CROP_H, width: int = CROP_W) -> np.ndarray:
    """Nearest-neighbour resample of a center-form box from an ink-valued page."""
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise ValueError("cannot crop an empty box")
    H, W = page.shape
    ys = np.clip(np.floor(y - h / 2 + (np.arange(height) + 0.5) * h / height).astype(int), 0, H - 1)
    xs = np.clip(np.floor(x - w / 2 + (np.arange(width) + 0.5) * w / width).astype(int), 0, W - 1)
    crop = page[np.ix_(ys, xs)]
    if crop.size == 0:
        raise ValueError("empty crop")
    return crop


class CNNWordClassifier(Module):
    """Three stride-2 conv blocks and a linear layer over a fixed-size word crop."""

    def __init__(self, rng, n_tags: int, channels=(16, 32, 64)):
        c1, c2, c3 = channels
        self.conv1 = Conv2d(rng, 1, c1, 3, stride=2)
        self.conv2 = Conv2d(rng, c1, c2, 3, stride=2)
        self.conv3 = Conv2d(rng, c2, c3, 3, stride=2)
        self.fc = Linear(rng, c3 * (CROP_H // 8) * (CROP_W // 8), n_tags)

    def __call__(self, crops: Tensor) -> Tensor:
        """crops: [B, 1, 32, 128] -> log-probabilities [B, n_tags]."""
        x = relu(self.conv1(crops))
        x = relu(self.conv2(x))
        x = relu(self.conv3(x))
        return log_softmax(self.fc(reshape(x, (x.shape[0], -1))), axis=-1)


def cnn_word_classifier(model: CNNWordClassifier, crops: np.ndarray) -> list[int]:
    crops = np.asarray(crops)
    if crops.ndim == 2:
        crops = crops[None]
    if crops.shape[0] == 0 or crops.shape[-1] == 0:
        raise ValueError("no crops to classify")
    logp = model(Tensor(crops[:, None]))
    return [int(i) for i in logp.data.argmax(axis=1)]
