"""The page reader: shared backbone plus the branches each setup enables."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .detect import (
    AnchorSet,
    DetectHead,
    assign_targets,
    cls_loss,
    gen_anchors,
    iou_matrix,
    postprocess,
    reg_loss,
)
from .ner import CNNWordClassifier, ReadingOrder, SeqTagger, TagSet, crop_word, reading_order
from .recog import Alphabet, RecogHead, ctc_loss_batch, greedy_decode
from .roi import roi_pool
from .tensor import Module, Tensor, add, mul, nll, no_grad, take_rows

SETUPS = ("A", "B", "C", "D", "baseline")

# branches enabled per setup: (recognition, sequential tagger, tags from the detector)
BRANCHES = {
    "A": (True, False, True),
    "B": (True, True, False),
    "C": (False, True, False),
    "D": (True, False, False),
}


def pad_page(ink: np.ndarray, multiple: int = 128, value: float = 0.0) -> np.ndarray:
    """Pad right and bottom to the next multiple so every pyramid level divides evenly."""
    H, W = ink.shape
    Hp = -(-H // multiple) * multiple
    Wp = -(-W // multiple) * multiple
    out = np.full((Hp, Wp), value, dtype=np.float32)
    out[:H, :W] = ink
    return out


@dataclass
class PageTargets:
    boxes: np.ndarray  # [n, 4] center form
    texts: list
    tags: np.ndarray  # tag indices


@dataclass
class PageOutput:
    boxes: np.ndarray
    scores: np.ndarray
    texts: list | None = None
    tags: list | None = None
    order: list = field(default_factory=list)


class PageReader(Module):
    def __init__(self, cfg: dict, setup: str, rng: np.random.Generator):
        if setup not in BRANCHES:
            raise ValueError(f"setup must be one of {tuple(BRANCHES)}, got {setup!r}")
        self.cfg = cfg
        self.setup = setup
        self.alphabet = Alphabet(cfg["recog"]["alphabet"])
        self.tagset = TagSet(tuple(cfg["ner"]["tags"]))
        use_recog, use_seq, tags_from_det = BRANCHES[setup]
        self.use_recog, self.use_seq, self.tags_from_det = use_recog, use_seq, tags_from_det
        d = cfg["detect"]
        bcfg = BackboneConfig.from_dict(cfg["backbone"])
        self.backbone = Backbone(bcfg, rng)
        n_classes = len(self.tagset) if tags_from_det else 1
        per_point = len(d["ratios"]) * len(d["scales"])
        self.detector = DetectHead(rng, bcfg.fpn_channels, n_classes, d["n_convs"], d["head_channels"], per_point)
        if use_recog:
            self.recognizer = RecogHead(rng, bcfg.fpn_channels, self.alphabet, cfg["recog"]["channels"])
        if use_seq:
            n = cfg["ner"]
            self.tagger = SeqTagger(rng, bcfg.fpn_channels, len(self.tagset), n["hidden"], n["groups"], n["max_len"])
        self.calls = Counter()  # branch invocations, for gating checks
        self._anchor_cache: dict = {}

    def anchors(self, shapes) -> AnchorSet:
        key = tuple(tuple(s) for s in shapes)
        if key not in self._anchor_cache:
            d = self.cfg["detect"]
            self._anchor_cache[key] = gen_anchors(shapes, base=d["anchor_base"], ratios=tuple(d["ratios"]),
                                                  scales=tuple(d["scales"]))
        return self._anchor_cache[key]

    def _input(self, ink: np.ndarray) -> Tensor:
        data = self.cfg["data"]
        return Tensor(pad_page(ink, data["pad_multiple"], data["pad_value"])[None, None])

    # -- training ------------------------------------------------------------

    def losses(self, ink: np.ndarray, target: PageTargets, teacher_forcing: bool = True) -> dict:
        """Per-branch losses for one page. Only enabled branches appear in the result."""
        H, W = ink.shape
        feats = self.backbone(self._input(ink))
        self.calls["detect"] += 1
        probs, deltas = self.detector(feats)
        anchors = self.anchors(feats.shapes())
        classes = target.tags if self.tags_from_det else np.zeros(len(target.boxes), dtype=np.int64)
        d = self.cfg["detect"]
        ctargets, tdeltas = assign_targets(anchors, target.boxes, classes, probs.shape[1], d["pos_iou"], d["neg_iou"])
        out = {"cls": cls_loss(probs, ctargets), "reg": reg_loss(take_rows(deltas, ctargets.positives), tdeltas)}
        if not (self.use_recog or self.use_seq) or len(target.boxes) == 0:
            return out

        boxes, texts, tags = target.boxes, list(target.texts), np.asarray(target.tags)
        if not teacher_forcing:
            dets = postprocess(probs.data, deltas.data, anchors, d["score_thresh"], d["nms_thresh"], (H, W),
                               d["pre_nms_top"])
            if dets:
                pred = np.array([x.box.as_array() for x in dets])
                ious = iou_matrix(pred, target.boxes)
                hit = ious.max(axis=1) >= 0.5
                if hit.any():
                    gi = ious.argmax(axis=1)[hit]
                    boxes, texts, tags = pred[hit], [target.texts[g] for g in gi], tags[gi]
        p = self.cfg["pool"]
        pooled = roi_pool(feats.finest, boxes, p["height"], p["width"], p["stride"]).tensor
        if self.use_recog:
            self.calls["recog"] += 1
            out["ctc"] = ctc_loss_batch(self.recognizer(pooled), texts, self.alphabet)
        if self.use_seq:
            self.calls["ner"] += 1
            order = reading_order(boxes)
            logp = self.tagger(pooled, order)
            idx = order.order[: logp.shape[0]]
            out["ner"] = nll(logp, tags[idx])
        return out

    def total_loss(self, parts: dict) -> Tensor:
        w = dict(zip(("cls", "reg", "ctc", "ner"), self.cfg["train"]["loss_weights"]))
        total = None
        for k, v in parts.items():
            term = v if w[k] == 1.0 else mul(v, w[k])
            total = term if total is None else add(total, term)
        return total

    # -- inference -----------------------------------------------------------

    def read(self, ink: np.ndarray, score_thresh: float | None = None) -> PageOutput:
        """Detect, transcribe and tag the words of one page, in reading order."""
        d = self.cfg["detect"]
        thresh = d["score_thresh"] if score_thresh is None else score_thresh
        H, W = ink.shape
        with no_grad():
            feats = self.backbone(self._input(ink))
            self.calls["detect"] += 1
            probs, deltas = self.detector(feats)
            dets = postprocess(probs.data, deltas.data, self.anchors(feats.shapes()), thresh, d["nms_thresh"],
                               (H, W), d["pre_nms_top"])
            if not dets:
                return PageOutput(np.zeros((0, 4)), np.zeros(0), [] if self.use_recog else None,
                                  [] if (self.use_seq or self.tags_from_det) else None, [])
            boxes = np.array([x.box.as_array() for x in dets])
            scores = np.array([x.score for x in dets])
            order = reading_order(boxes)
            res = PageOutput(boxes, scores, order=order.order)
            if self.tags_from_det:
                res.tags = [self.tagset.tags[x.cls] for x in dets]
            if self.use_recog or self.use_seq:
                p = self.cfg["pool"]
                pooled = roi_pool(feats.finest, boxes, p["height"], p["width"], p["stride"]).tensor
                if self.use_recog:
                    self.calls["recog"] += 1
                    lat = self.recognizer(pooled).data
                    res.texts = [greedy_decode(lat[i], self.alphabet) for i in range(len(boxes))]
                if self.use_seq:
                    self.calls["ner"] += 1
                    logp = self.tagger(pooled, order).data
                    tags = [self.tagset.tags[self.tagset.other]] * len(boxes)
                    for pos, i in enumerate(order.order[: len(logp)]):
                        tags[i] = self.tagset.tags[int(logp[pos].argmax())]
                    res.tags = tags
        return res


class BaselineClassifier(Module):
    """Context-free tagger over ground-truth word crops."""

    def __init__(self, cfg: dict, rng: np.random.Generator):
        self.cfg = cfg
        self.setup = "baseline"
        self.alphabet = Alphabet(cfg["recog"]["alphabet"])
        self.tagset = TagSet(tuple(cfg["ner"]["tags"]))
        self.net = CNNWordClassifier(rng, len(self.tagset))
        self.calls = Counter()

    def crops(self, ink: np.ndarray, boxes) -> np.ndarray:
        return np.stack([crop_word(ink, b) for b in boxes]).astype(np.float32) if len(boxes) else np.zeros((0, 32, 128))

    def losses(self, ink: np.ndarray, target: PageTargets, teacher_forcing: bool = True) -> dict:
        self.calls["ner"] += 1
        logp = self.net(Tensor(self.crops(ink, target.boxes)[:, None]))
        return {"ner": nll(logp, np.asarray(target.tags))}

    def total_loss(self, parts: dict) -> Tensor:
        return parts["ner"]

    def classify(self, ink: np.ndarray, boxes) -> list:
        if len(boxes) == 0:
            return []
        with no_grad():
            logp = self.net(Tensor(self.crops(ink, boxes)[:, None])).data
        return [self.tagset.tags[int(i)] for i in logp.argmax(axis=1)]


def build_model(cfg: dict, setup: str, seed: int = 0):
    rng = np.random.default_rng(seed)
    if setup == "baseline":
        return BaselineClassifier(cfg, rng)
    return PageReader(cfg, setup, rng)
