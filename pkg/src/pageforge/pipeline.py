"""Training, evaluation and prediction for every setup."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import checkpoint
from .config import config_hash
from .metrics import MetricCounts, average_precision, corpus_cer, f1, match_detections
from .model import PageReader, PageTargets, build_model
from .synth.generator import load_page, load_split
from .tensor import SGD, Adam, no_grad

log = logging.getLogger("pageforge")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint_path=None):
        super().__init__(msg)
        self.checkpoint_path = checkpoint_path


class DatasetError(ValueError):
    pass


@dataclass
class Page:
    ink: np.ndarray
    target: PageTargets
    image: str = ""


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    since_best: int = 0
    teacher_forcing: bool = True
    best_epoch: int = 0
    history: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "best_val": self.best_val, "since_best": self.since_best,
                "teacher_forcing": self.teacher_forcing, "best_epoch": self.best_epoch}


def load_pages(root, split: str, tags, alphabet=None) -> list[Page]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    pages = []
    for rec in load_split(root, split):
        ps = load_page(root, rec)
        texts = [w.text for w in ps.words]
        if alphabet is not None:
            bad = sorted({c for t in texts for c in t if c not in alphabet.symbols})
            if bad:
                raise DatasetError(f"{split} split uses characters outside the model alphabet: {''.join(bad)!r}")
        try:
            tag_idx = np.array([tags.index(w.tag) for w in ps.words], dtype=np.int64)
        except ValueError as exc:
            raise DatasetError(f"{split} split uses a tag outside {tags}: {exc}") from None
        boxes = np.array([w.box for w in ps.words], dtype=np.float64).reshape(-1, 4)
        pages.append(Page(ps.ink, PageTargets(boxes, texts, tag_idx), rec["image"]))
    if not pages:
        raise DatasetError(f"{split} split of {root} is empty")
    return pages


def _optimizer(model, tcfg: dict):
    params = model.parameters()
    if tcfg["optimizer"] == "adam":
        return Adam(params, tcfg["lr"], clip_norm=tcfg["clip_norm"])
    return SGD(params, tcfg["lr"], tcfg["momentum"], tcfg["clip_norm"])


def shift_page(page: Page, rng: np.random.Generator, max_shift: int, multiple: int) -> Page:
    """Translate the page inside its padded canvas; boxes move with it.

    The shift never changes the padded size, so it adds no compute. Vertical
    moves are limited by the word boxes so no ink is cut off.
    """
    if max_shift <= 0:
        return page
    H, W = page.ink.shape
    room_x = min(max_shift, -(-W // multiple) * multiple - W)
    b = page.target.boxes
    if len(b):
        top = int(np.floor((b[:, 1] - b[:, 3] / 2).min()))
        bottom = int(np.ceil(H - (b[:, 1] + b[:, 3] / 2).max()))
    else:
        top = bottom = 0
    dx = int(rng.integers(0, room_x + 1))
    dy = int(rng.integers(-min(max_shift, max(top, 0)), min(max_shift, max(bottom, 0)) + 1))
    ink = np.zeros((H, W + dx), dtype=page.ink.dtype)
    src = page.ink[max(-dy, 0): H - max(dy, 0)]
    ink[max(dy, 0): max(dy, 0) + len(src), dx:] = src
    boxes = b + np.array([dx, dy, 0, 0], dtype=b.dtype) if len(b) else b
    return Page(ink, PageTargets(boxes, page.target.texts, page.target.tags), page.image)


def _snapshot(model) -> list:
    return [p.data.copy() for p in model.parameters()]


def _restore(model, snap: list) -> None:
    for p, a in zip(model.parameters(), snap):
        p.data = a.copy()


def validation_loss(model, pages: list[Page], teacher_forcing: bool = True) -> tuple[float, dict]:
    """Mean total loss over ``pages`` and the mean of each branch term."""
    totals, parts = [], {}
    with no_grad():
        for p in pages:
            terms = model.losses(p.ink, p.target, teacher_forcing)
            totals.append(float(model.total_loss(terms).data))
            for k, v in terms.items():
                parts.setdefault(k, []).append(float(v.data))
    return float(np.mean(totals)), {k: float(np.mean(v)) for k, v in parts.items()}


def train(data_root, setup: str, cfg: dict, out=None, resume=None, pages: list[Page] | None = None,
          valid_pages: list[Page] | None = None, on_epoch=None):
    """Fit one setup. Returns (model, TrainState); the best-validation weights are restored at the end."""
    tcfg = cfg["train"]
    model = build_model(cfg, setup, tcfg["seed"])
    tags = list(model.tagset.tags)
    if pages is None:
        pages = load_pages(data_root, "train", tags, model.alphabet)
    if valid_pages is None:
        try:
            valid_pages = load_pages(data_root, "valid", tags, model.alphabet)
        except (DatasetError, FileNotFoundError):
            valid_pages = pages
    opt = _optimizer(model, tcfg)
    rng = np.random.default_rng(tcfg["seed"] + 1)
    state = TrainState()
    best = None
    if resume is not None:
        state, rng, best = _resume(model, opt, resume)
    best = best or _snapshot(model)
    uses_pool = isinstance(model, PageReader) and (model.use_recog or model.use_seq)
    if not uses_pool:
        state.teacher_forcing = True
    max_steps = tcfg["max_steps"]

    while state.epoch < tcfg["epochs"]:
        order = rng.permutation(len(pages))
        losses, part_sums = [], {}
        for i in order:
            page = shift_page(pages[i], rng, cfg["data"]["shift"], cfg["data"]["pad_multiple"])
            parts = model.losses(page.ink, page.target, state.teacher_forcing)
            loss = model.total_loss(parts)
            value = float(loss.data)
            if not math.isfinite(value):
                path = None
                if out is not None:
                    path = Path(str(out) + ".lastgood")
                    checkpoint.save(path, model, {"state": state.to_json(), "diverged": True})
                raise TrainingDiverged(f"non-finite loss at epoch {state.epoch + 1}, step {state.step + 1} "
                                       f"(page {pages[i].image or i})", path)
            loss.backward()
            opt.step()
            state.step += 1
            losses.append(value)
            for k, v in parts.items():
                part_sums.setdefault(k, []).append(float(v.data))
            if max_steps is not None and state.step >= max_steps:
                break
        state.epoch += 1
        val, val_parts = validation_loss(model, valid_pages, state.teacher_forcing)
        entry = {"epoch": state.epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
                 "train_parts": {k: float(np.mean(v)) for k, v in part_sums.items()}, "val_parts": val_parts,
                 "teacher_forcing": state.teacher_forcing}
        if val < state.best_val:
            state.best_val, state.since_best, state.best_epoch = val, 0, state.epoch
            best = _snapshot(model)
        else:
            state.since_best += 1
        if uses_pool and state.teacher_forcing and state.epoch % tcfg["eval_every"] == 0:
            ap = evaluate_pages(model, valid_pages)["ap"]
            entry["val_ap"] = ap
            if ap > tcfg["teacher_forcing_ap"]:
                # pooled branches now see predicted boxes and the loss changes scale: restart the comparison
                state.teacher_forcing = False
                state.best_val, state.since_best = math.inf, 0
        state.history.append(entry)
        log.info("epoch %d train %.4f val %.4f%s", state.epoch, entry["train_loss"], val,
                 f" ap {entry['val_ap']:.3f}" if "val_ap" in entry else "")
        if on_epoch is not None:
            on_epoch(model, state)
        if state.since_best >= tcfg["patience"] or (max_steps is not None and state.step >= max_steps):
            break

    last = _snapshot(model)
    _restore(model, best)
    if out is not None:
        save_checkpoint(out, model, opt, rng, state, last)
    return model, state


def save_checkpoint(path, model, opt, rng, state: TrainState, last: list | None = None) -> None:
    """Best weights go in the parameter table; the latest weights ride along so a resume continues exactly."""
    extra = []
    if isinstance(opt, Adam):
        extra = [(f"opt.m.{i}", m) for i, m in enumerate(opt.m)] + [(f"opt.v.{i}", v) for i, v in enumerate(opt.v)]
        opt_meta = {"kind": "adam", "t": opt.t}
    else:
        extra = [(f"opt.buf.{i}", b) for i, b in enumerate(opt.buf)]
        opt_meta = {"kind": "sgd"}
    extra += [(f"last.{i}", a) for i, a in enumerate(last or [])]
    meta = {"state": state.to_json(), "history": state.history, "optimizer": opt_meta,
            "rng": rng.bit_generator.state}
    checkpoint.save(path, model, meta, extra)


def _resume(model, opt, path):
    header, arrays = checkpoint.read(path)
    checkpoint.load_into(model, header, arrays)
    best = _snapshot(model)
    if "last.0" in arrays:
        _restore(model, [arrays[f"last.{i}"] for i in range(len(best))])
    meta = header["meta"]
    n = len(opt.params)
    if isinstance(opt, Adam):
        opt.load_state({"t": meta["optimizer"]["t"], "m": [arrays[f"opt.m.{i}"] for i in range(n)],
                        "v": [arrays[f"opt.v.{i}"] for i in range(n)]})
    else:
        opt.load_state({"buf": [arrays[f"opt.buf.{i}"] for i in range(n)]})
    s = meta["state"]
    state = TrainState(s["epoch"], s["step"], s["best_val"], s["since_best"], s["teacher_forcing"], s["best_epoch"],
                       list(meta.get("history", [])))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return state, rng, best


# -- evaluation ------------------------------------------------------------------

def evaluate_pages(model, pages: list[Page], iou_thresh: float = 0.5) -> dict:
    """AP, CER and entity F1 (whichever the setup produces) over a list of pages."""
    other = model.tagset.tags[model.tagset.other]
    det = MetricCounts()
    ent = MetricCounts()
    pairs = []
    n_gt = 0
    with_tags = with_text = False
    for page in pages:
        gt = page.target
        gt_tags = np.array([model.tagset.tags[i] for i in gt.tags])
        n_gt += len(gt.boxes)
        if model.setup == "baseline":
            with_tags = True
            pred = model.classify(page.ink, gt.boxes)
            ent = ent.merge(match_detections(gt.boxes, np.ones(len(gt.boxes)), gt.boxes, iou_thresh,
                                             np.array(pred), gt_tags, other))
            continue
        out = model.read(page.ink)
        counts = match_detections(out.boxes, out.scores, gt.boxes, iou_thresh)
        det = det.merge(counts)
        if out.texts is not None:
            with_text = True
            pairs += [(out.texts[d], gt.texts[g]) for d, g in enumerate(counts.matches) if g is not None]
        if out.tags is not None:
            with_tags = True
            ent = ent.merge(match_detections(out.boxes, out.scores, gt.boxes, iou_thresh, np.array(out.tags), gt_tags,
                                             other))
    report: dict = {"setup": model.setup, "pages": len(pages), "words": n_gt, "counts": {}}
    if model.setup != "baseline":
        report["ap"] = average_precision(det.scored, n_gt) if n_gt else 0.0
        report["counts"]["detection"] = det.as_dict()
    if with_text:
        report["cer"] = corpus_cer(pairs) if pairs else 1.0
    if with_tags:
        report["f1"] = f1(ent)
        report["counts"]["entity"] = ent.as_dict()
    return report


def evaluate(model, data_root, split: str = "test") -> dict:
    pages = load_pages(data_root, split, list(model.tagset.tags), model.alphabet)
    report = evaluate_pages(model, pages)
    report["split"] = split
    report["config_hash"] = config_hash(model.cfg)
    return report


def pr_points(model, pages: list[Page], iou_thresh: float = 0.5):
    """Score-ranked (recall, precision) pairs for plotting."""
    det = MetricCounts()
    n_gt = 0
    for page in pages:
        out = model.read(page.ink)
        det = det.merge(match_detections(out.boxes, out.scores, page.target.boxes, iou_thresh))
        n_gt += len(page.target.boxes)
    if not det.scored or not n_gt:
        return np.zeros(0), np.zeros(0)
    scored = sorted(det.scored, key=lambda s: -s[0])
    hits = np.array([h for _, h in scored], dtype=np.float64)
    tp = np.cumsum(hits)
    return tp / n_gt, tp / np.arange(1, len(hits) + 1)


# -- prediction ------------------------------------------------------------------

def prediction_schema() -> dict:
    return json.loads(resources.files("pageforge.data").joinpath("prediction.schema.json").read_text())


def load_image(path) -> np.ndarray:
    """Grayscale page as ink values in [0, 1] (0 = paper)."""
    try:
        with Image.open(path) as im:
            img = np.asarray(im.convert("L"), dtype=np.float32)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot load image {path}: {exc}") from None
    return 1.0 - img / 255.0


def predict(model, ink: np.ndarray) -> dict:
    if model.setup == "baseline":
        raise ValueError("the crop classifier needs word boxes; predict works with setups A-D")
    out = model.read(ink)
    words = []
    for i in out.order:
        w = {"box": [round(float(v), 4) for v in out.boxes[i]], "score": round(float(out.scores[i]), 6)}
        if out.texts is not None:
            w["text"] = out.texts[i]
        if out.tags is not None:
            w["tag"] = out.tags[i]
        words.append(w)
    return {"setup": model.setup, "height": int(ink.shape[0]), "width": int(ink.shape[1]), "words": words}
