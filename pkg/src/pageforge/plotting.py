"""Report figures rendered straight to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

TAG_COLORS = {"name": "tab:blue", "location": "tab:green", "date": "tab:orange", "occupation": "tab:purple",
              "other": "0.5"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(history: list, path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [h["train_loss"] for h in history], label="train")
    ax.plot(epochs, [h["val_loss"] for h in history], label="validation")
    switch = next((h["epoch"] for h in history if not h.get("teacher_forcing", True)), None)
    if switch is not None:
        ax.axvline(switch, color="0.6", ls="--", lw=1, label="predicted boxes")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def pr_curve(recall, precision, ap: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    if len(recall):
        interp = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
        ax.plot(recall, precision, color="0.7", lw=1, label="raw")
        ax.step(recall, interp, where="post", label=f"interpolated (AP {ap:.3f})")
        ax.legend(frameon=False, loc="lower left")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    fig.tight_layout()
    return _save(fig, path)


def overlay(ink: np.ndarray, reading: dict, path) -> Path:
    """Draw predicted boxes with their transcription and tag over the page."""
    H, W = ink.shape
    fig, ax = plt.subplots(figsize=(W / 60, H / 60))
    ax.imshow(1.0 - ink, cmap="gray", vmin=0, vmax=1)
    for k, w in enumerate(reading["words"]):
        cx, cy, bw, bh = w["box"]
        color = TAG_COLORS.get(w.get("tag"), "tab:red")
        ax.add_patch(Rectangle((cx - bw / 2, cy - bh / 2), bw, bh, fill=False, ec=color, lw=1))
        label = f"{k}:{w.get('text', '')}"
        ax.text(cx - bw / 2, cy - bh / 2 - 1, label, color=color, fontsize=6, va="bottom")
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    return _save(fig, path)
