"""Run configuration: one JSON document with backbone, detect, pool, recog, ner, train and data sections."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .backbone import BackboneConfig
from .ner import DEFAULT_TAGS
from .recog import DEFAULT_SYMBOLS

SECTIONS = ("backbone", "detect", "pool", "recog", "ner", "train", "data")

# Values stated for the original full-page system.
PAPER = {
    "backbone": BackboneConfig.full_scale().to_dict(),
    "detect": {"n_convs": 4, "head_channels": None, "anchor_base": 32.0, "ratios": [0.5, 1.0, 2.0],
               "scales": [1.0, 2 ** (1 / 3), 2 ** (2 / 3)], "pos_iou": 0.5, "neg_iou": 0.4,
               "score_thresh": 0.5, "nms_thresh": 0.2, "pre_nms_top": 1000},
    "pool": {"height": 8, "width": 32, "stride": 8},
    "recog": {"channels": 256, "alphabet": DEFAULT_SYMBOLS},
    "ner": {"tags": list(DEFAULT_TAGS), "hidden": 256, "groups": 4, "max_len": 64},
    "train": {"optimizer": "sgd", "lr": 1e-4, "momentum": 0.0, "clip_norm": None, "epochs": 1000,
              "patience": 100, "loss_weights": [1.0, 1.0, 1.0, 1.0], "teacher_forcing_ap": 0.5,
              "max_steps": None, "seed": 0, "eval_every": 1},
    "data": {"pad_multiple": 128, "pad_value": 0.0, "baseline_epochs": 30, "shift": 0},
}

# Reduced widths and Adam so a laptop CPU finishes in minutes.
DESK = copy.deepcopy(PAPER)
DESK["backbone"] = BackboneConfig().to_dict()
DESK["detect"].update({"n_convs": 2, "head_channels": 32})
DESK["recog"].update({"channels": 48})
DESK["ner"].update({"hidden": 48})
DESK["data"].update({"shift": 32})
DESK["train"].update({"optimizer": "adam", "lr": 1e-3, "clip_norm": 10.0, "epochs": 300, "patience": 20})

PRESETS = {"desk": DESK, "paper": PAPER}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> dict:
    """Start from a preset, apply the JSON file (which may name its own preset), then overrides."""
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    name = preset or raw.pop("preset", "desk")
    raw.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    cfg = merge(PRESETS[name], raw)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for s in SECTIONS:
        if s not in cfg:
            raise ConfigError(f"config section {s!r} missing")
    BackboneConfig.from_dict(cfg["backbone"])
    if cfg["pool"]["stride"] != 8:
        raise ConfigError("pooling reads the stride-8 level; pool.stride must be 8")
    if cfg["data"]["pad_multiple"] % 128:
        raise ConfigError("data.pad_multiple must be a multiple of 128")
    if len(cfg["train"]["loss_weights"]) != 4:
        raise ConfigError("train.loss_weights needs 4 entries (cls, reg, ctc, ner)")
    if cfg["train"]["optimizer"] not in ("sgd", "adam"):
        raise ConfigError("train.optimizer must be 'sgd' or 'adam'")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
