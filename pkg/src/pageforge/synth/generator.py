"""Seeded page generator for the records, forms and prose regimes."""

from __future__ import annotations

import hashlib
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from . import vocab
from .glyphs import Style, random_style, render_word

REGIMES = ("records", "forms", "prose")
SPLITS = ("train", "valid", "test")
MAX_WORD_LEN = 15  # CTC needs 2 * len + 1 <= 32 frames

# Tag letters used by the records grammar.
LETTER = {"name": "N", "location": "L", "date": "D", "occupation": "C", "other": "O"}
RECORD_GRAMMAR = re.compile(r"^O D N N (C )?O L O N N( O O N( C)?)?$")


class LayoutOverflow(RuntimeError):
    pass


@dataclass
class Word:
    box: tuple  # center form (cx, cy, w, h)
    text: str
    tag: str
    record: int = -1

    def to_json(self) -> dict:
        return {"box": [float(v) for v in self.box], "text": self.text, "tag": self.tag}


@dataclass
class PageSample:
    image: np.ndarray  # uint8, 255 = paper
    words: list

    @property
    def ink(self) -> np.ndarray:
        return 1.0 - self.image.astype(np.float32) / 255.0


@dataclass
class GenConfig:
    regime: str = "records"
    seed: int = 0
    pages: dict = field(default_factory=lambda: {"train": 50, "valid": 10, "test": 10})
    height: int = 256
    width: int = 320
    scale_range: tuple = (2.5, 3.5)
    max_shear: float = 15.0
    word_noise: float = 0.1
    salt_pepper: float = 0.01
    page_noise: float = 0.02
    margin: int = 8
    word_gap: int = 12
    line_gap: int = 8
    entity_density: float = 0.17  # prose regime target
    decoy_rate: float = 0.10  # prose: ambiguous words used as ordinary words
    pseudo_rate: float = 0.35  # forms: share of invented values
    max_retries: int = 8
    vocab: dict = field(default_factory=lambda: {
        "name": list(vocab.NAMES),
        "location": list(vocab.LOCATIONS),
        "occupation": list(vocab.OCCUPATIONS),
        "ambiguous": list(vocab.AMBIGUOUS),
        "common_names": list(vocab.COMMON_NAMES),
        "filler": list(vocab.FILLER),
    })

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        self.scale_range = tuple(self.scale_range)
        if self.height < 64 or self.width < 64:
            raise ValueError("page must be at least 64x64")
        for split in SPLITS:
            self.pages.setdefault(split, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


def _choice(rng, items):
    return items[int(rng.integers(len(items)))]


def pseudo_word(rng, syllables=vocab.SYLLABLES) -> str:
    return "".join(_choice(rng, syllables) for _ in range(int(rng.integers(2, 4))))


def _date(rng, long: bool) -> str:
    year = str(int(rng.integers(1800, 1930)))
    if not long:
        return year
    return f"{int(rng.integers(1, 29)):02d}/{int(rng.integers(1, 13)):02d}/{year}"


# -- word streams -------------------------------------------------------------

def record_words(rng, cfg: GenConfig, record_id: int) -> list:
    """One marriage-record-like entry as (text, tag) pairs."""
    v = cfg.vocab
    out = [("on", "other"), (_date(rng, rng.random() < 0.5), "date"),
           (_choice(rng, v["name"]), "name"), (_choice(rng, v["name"]), "name")]
    if rng.random() < 0.7:
        out.append((_choice(rng, v["occupation"]), "occupation"))
    out += [("of", "other"), (_choice(rng, v["location"]), "location"), ("with", "other"),
            (_choice(rng, v["name"]), "name"), (_choice(rng, v["name"]), "name")]
    if rng.random() < 0.6:
        out += [(_choice(rng, ("daughter", "son")), "other"), ("of", "other"), (_choice(rng, v["name"]), "name")]
        if rng.random() < 0.5:
            out.append((_choice(rng, v["occupation"]), "occupation"))
    return [(t, g, record_id) for t, g in out]


def parses_as_record(tags) -> bool:
    return bool(RECORD_GRAMMAR.match(" ".join(LETTER[t] for t in tags)))


def prose_words(rng, cfg: GenConfig, n: int) -> list:
    """Running text where entity words follow trigger words."""
    v = cfg.vocab
    q = cfg.decoy_rate
    f = cfg.entity_density
    # entity share = p / (1 + p + q) when phrases are two words and fillers one
    p = f * (1 + q) / (1 - f)
    out = []
    while len(out) < n:
        u = rng.random()
        if u < p:
            kind = _choice(rng, ("name", "name", "location", "location", "date", "occupation"))
            if kind == "name":
                pool = _choice(rng, (v["ambiguous"], v["ambiguous"], v["common_names"], v["name"]))
                out += [(_choice(rng, vocab.NAME_TITLES), "other"), (_choice(rng, pool), "name")]
            elif kind == "location":
                pool = v["ambiguous"] if rng.random() < 0.6 else v["location"]
                out += [(_choice(rng, vocab.PLACE_PREPS), "other"), (_choice(rng, pool), "location")]
            elif kind == "date":
                word = _choice(rng, vocab.WEEKDAYS + vocab.MONTHS) if rng.random() < 0.6 else _date(rng, False)
                out += [(_choice(rng, vocab.DATE_PREPS), "other"), (word, "date")]
            else:
                out += [("as", "other"), (_choice(rng, v["occupation"]), "occupation")]
        elif u < p + q:
            pool = v["ambiguous"] if rng.random() < 0.5 else v["common_names"]
            out += [(_choice(rng, vocab.ARTICLES), "other"), (_choice(rng, pool), "other")]
        else:
            out.append((_choice(rng, v["filler"] + list(vocab.PLACE_PREPS)), "other"))
    return [(t, g, -1) for t, g in out]


# -- layout -------------------------------------------------------------------

def _render(rng, cfg: GenConfig, text: str, scale: float, printed: bool = False):
    if printed:
        style = Style(scale=2.0, ink=0.6)
        return render_word(text, style)
    style = random_style(rng, text, (scale * 0.92, scale * 1.08), cfg.max_shear, cfg.word_noise, cfg.salt_pepper)
    return render_word(text, style, rng)


def _flow(rng, cfg: GenConfig, items, scale: float, canvas: np.ndarray, y0: int, y1: int, words: list,
          stop_when_full: bool) -> int:
    """Place rendered items left to right, wrapping lines, inside rows [y0, y1).

    Returns how many items were placed. Raises LayoutOverflow when an item does
    not fit and ``stop_when_full`` is false.
    """
    W = cfg.width
    x = cfg.margin
    y = y0
    line_h = 0
    placed = 0
    for text, tag, rec, *rest in items:
        printed = bool(rest and rest[0])
        bmp, _ = _render(rng, cfg, text, scale, printed)
        h, w = bmp.shape
        if w > W - 2 * cfg.margin:
            raise LayoutOverflow(f"word {text!r} is wider than the page")
        if x + w > W - cfg.margin:
            x = cfg.margin
            y += line_h + cfg.line_gap
            line_h = 0
        dy = int(rng.integers(0, 3))
        if y + dy + h > y1:
            if stop_when_full:
                return placed
            raise LayoutOverflow("page is full")
        top = y + dy
        canvas[top : top + h, x : x + w] = np.maximum(canvas[top : top + h, x : x + w], bmp)
        words.append(Word((x + w / 2, top + h / 2, float(w), float(h)), text, tag, rec))
        x += w + cfg.word_gap + int(rng.integers(0, 6))
        line_h = max(line_h, h + dy)
        placed += 1
    return placed


def _finish(rng, cfg: GenConfig, canvas: np.ndarray, words: list) -> PageSample:
    ink = canvas
    if cfg.page_noise > 0:
        ink = ink + rng.normal(0, cfg.page_noise, ink.shape)
    img = np.clip(np.round((1.0 - np.clip(ink, 0, 1)) * 255), 0, 255).astype(np.uint8)
    return PageSample(img, words)


def _records_page(rng, cfg, scale):
    canvas = np.zeros((cfg.height, cfg.width), dtype=np.float32)
    words: list = []
    rec = 0
    y = cfg.margin
    while True:
        items = record_words(rng, cfg, rec)
        trial_canvas = canvas.copy()
        trial_words: list = []
        try:
            _flow(rng, cfg, items, scale, trial_canvas, y, cfg.height - cfg.margin, trial_words, False)
        except LayoutOverflow:
            if not words:
                raise
            return canvas, words
        canvas, words = trial_canvas, words + trial_words
        bottom = max(w.box[1] + w.box[3] / 2 for w in trial_words)
        y = int(np.ceil(bottom)) + cfg.line_gap
        rec += 1


def _prose_page(rng, cfg, scale):
    canvas = np.zeros((cfg.height, cfg.width), dtype=np.float32)
    words: list = []
    stream = prose_words(rng, cfg, 200)
    n = _flow(rng, cfg, stream, scale, canvas, cfg.margin, cfg.height - cfg.margin, words, True)
    if n == 0:
        raise LayoutOverflow("no word fits on the page")
    return canvas, words


def _forms_page(rng, cfg, scale):
    """Three stacked regions: names on top, places in the middle, dates at the bottom."""
    canvas = np.zeros((cfg.height, cfg.width), dtype=np.float32)
    words: list = []
    v = cfg.vocab
    H = cfg.height
    cuts = [cfg.margin, H // 3 + int(rng.integers(-10, 11)), 2 * H // 3 + int(rng.integers(-10, 11)), H - cfg.margin]
    for region, tag in enumerate(("name", "location", "date")):
        items = [(vocab.FORM_KEYS[tag], "other", -1, True)]
        for _ in range(int(rng.integers(1, 4))):
            if tag == "date":
                text = _date(rng, rng.random() < 0.6)
            else:
                u = rng.random()
                if u < cfg.pseudo_rate:
                    text = pseudo_word(rng)
                elif u < cfg.pseudo_rate + 0.35:
                    text = _choice(rng, v["ambiguous"])
                else:
                    text = _choice(rng, v[tag])
            items.append((text, tag, -1))
        y0 = cuts[region] + int(rng.integers(0, 6))
        _flow(rng, cfg, items, scale, canvas, y0, cuts[region + 1], words, False)
    return canvas, words


_BUILDERS = {"records": _records_page, "prose": _prose_page, "forms": _forms_page}


def gen_page(cfg: GenConfig, rng: np.random.Generator) -> PageSample:
    """Lay out one page; on overflow retry with smaller glyphs, then give up."""
    scale = float(rng.uniform(*cfg.scale_range))
    for _ in range(cfg.max_retries):
        try:
            canvas, words = _BUILDERS[cfg.regime](rng, cfg, scale)
            return _finish(rng, cfg, canvas, words)
        except LayoutOverflow:
            scale *= 0.85
    raise LayoutOverflow(f"could not lay out a {cfg.regime} page after {cfg.max_retries} attempts")


def page_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


def _gen_one(args):
    cfg, split, i = args
    return gen_page(cfg, page_rng(cfg.seed, split, i))


# -- datasets -----------------------------------------------------------------

def dataset_stats(records: dict) -> dict:
    """Summary per split: pages, words, OOV against train, entity share, tag count."""
    train_vocab = {w["text"] for r in records.get("train", []) for w in r["words"]}
    by_word: dict = {}
    out: dict = {"splits": {}}
    for split, recs in records.items():
        words = [w for r in recs for w in r["words"]]
        for w in words:
            by_word.setdefault(w["text"], set()).add(w["tag"])
        n = len(words)
        ents = sum(1 for w in words if w["tag"] != "other")
        row = {"pages": len(recs), "words": n,
               "entity_pct": round(100.0 * ents / n, 4) if n else 0.0,
               "tags": len({w["tag"] for w in words})}
        if split != "train":
            vocab_s = {w["text"] for w in words}
            oov = sorted(vocab_s - train_vocab)
            row["oov"] = len(oov)
            row["oov_pct"] = round(100.0 * len(oov) / len(vocab_s), 4) if vocab_s else 0.0
        out["splits"][split] = row
    out["ambiguous_words"] = sorted(w for w, tags in by_word.items() if len(tags) > 1)
    return out


def gen_dataset(cfg: GenConfig, root, force: bool = False, workers: int | None = None) -> dict:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
    if all(cfg.pages[s] < 1 for s in SPLITS):
        raise ValueError("need at least one page")
    workers = workers or int(os.environ.get("PAGEFORGE_THREADS", "1"))
    root.mkdir(parents=True, exist_ok=True)
    records: dict = {}
    for split in SPLITS:
        n = cfg.pages[split]
        if n < 1:
            continue
        jobs = [(cfg, split, i) for i in range(n)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                pages = list(pool.map(_gen_one, jobs))
        else:
            pages = [_gen_one(j) for j in jobs]
        (root / split / "pages").mkdir(parents=True, exist_ok=True)
        recs = []
        for i, page in enumerate(pages):
            rel = f"{split}/pages/{i:05d}.png"
            Image.fromarray(page.image, mode="L").save(root / rel, optimize=False)
            recs.append({"image": rel, "words": [w.to_json() for w in page.words]})
        with open(root / f"{split}.jsonl", "w") as fh:
            for r in recs:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        records[split] = recs
    stats = dataset_stats(records)
    stats["regime"] = cfg.regime
    stats["seed"] = cfg.seed
    stats["config"] = cfg.to_dict()
    with open(root / "stats.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stats


def stats_schema() -> dict:
    return json.loads(resources.files("pageforge.data").joinpath("stats.schema.json").read_text())


def load_split(root, split: str) -> list:
    """Ground-truth records of one split; images are loaded lazily by callers."""
    path = Path(root) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing split file {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_page(root, record: dict) -> PageSample:
    img = np.asarray(Image.open(Path(root) / record["image"]).convert("L"))
    words = [Word(tuple(w["box"]), w["text"], w["tag"]) for w in record["words"]]
    return PageSample(img, words)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
