"""Built-in 5x7 bitmap glyphs and word rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FONT = {
    "a": ["     ", "     ", " ### ", "    #", " ####", "#   #", " ####"],
    "b": ["#    ", "#    ", "# ## ", "##  #", "#   #", "#   #", "#### "],
    "c": ["     ", "     ", " ### ", "#    ", "#    ", "#   #", " ### "],
    "d": ["    #", "    #", " ## #", "#  ##", "#   #", "#   #", " ####"],
    "e": ["     ", "     ", " ### ", "#   #", "#####", "#    ", " ### "],
    "f": ["  ## ", " #  #", " #   ", "###  ", " #   ", " #   ", " #   "],
    "g": ["     ", " ####", "#   #", "#   #", " ####", "    #", " ### "],
    "h": ["#    ", "#    ", "# ## ", "##  #", "#   #", "#   #", "#   #"],
    "i": ["  #  ", "     ", " ##  ", "  #  ", "  #  ", "  #  ", " ### "],
    "j": ["   # ", "     ", "  ## ", "   # ", "   # ", "#  # ", " ##  "],
    "k": ["#    ", "#    ", "#  # ", "# #  ", "##   ", "# #  ", "#  # "],
    "l": [" ##  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    "m": ["     ", "     ", "## # ", "# # #", "# # #", "#   #", "#   #"],
    "n": ["     ", "     ", "# ## ", "##  #", "#   #", "#   #", "#   #"],
    "o": ["     ", "     ", " ### ", "#   #", "#   #", "#   #", " ### "],
    "p": ["     ", "     ", "#### ", "#   #", "#### ", "#    ", "#    "],
    "q": ["     ", "     ", " ## #", "#  ##", " ####", "    #", "    #"],
    "r": ["     ", "     ", "# ## ", "##  #", "#    ", "#    ", "#    "],
    "s": ["     ", "     ", " ### ", "#    ", " ### ", "    #", "#### "],
    "t": [" #   ", " #   ", "###  ", " #   ", " #   ", " #  #", "  ## "],
    "u": ["     ", "     ", "#   #", "#   #", "#   #", "#  ##", " ## #"],
    "v": ["     ", "     ", "#   #", "#   #", "#   #", " # # ", "  #  "],
    "w": ["     ", "     ", "#   #", "#   #", "# # #", "# # #", " # # "],
    "x": ["     ", "     ", "#   #", " # # ", "  #  ", " # # ", "#   #"],
    "y": ["     ", "     ", "#   #", "#   #", " ####", "    #", " ### "],
    "z": ["     ", "     ", "#####", "   # ", "  #  ", " #   ", "#####"],
    "0": [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    "1": ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    "2": [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    "3": ["#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "],
    "4": ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    "5": ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    "6": ["  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "],
    "7": ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
    "8": [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    "9": [" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "],
    "/": ["    #", "    #", "   # ", "  #  ", " #   ", "#    ", "#    "],
}

GLYPH_W, GLYPH_H = 5, 7
GLYPHS = {ch: np.array([[c == "#" for c in row] for row in rows], dtype=np.float32) for ch, rows in _FONT.items()}
CHARSET = "".join(sorted(GLYPHS))


@dataclass
class Style:
    scale: float = 2.0
    shear_deg: float = 0.0
    thicken: bool = False
    baseline_jitter: tuple = ()  # per-character vertical offsets in pixels
    noise_sigma: float = 0.0
    salt_pepper: float = 0.0
    ink: float = 1.0


def random_style(rng: np.random.Generator, text: str, scale_range=(2.0, 4.0), max_shear: float = 15.0,
                 max_sigma: float = 0.1, max_sp: float = 0.01, baseline: int = 2) -> Style:
    return Style(
        scale=float(rng.uniform(*scale_range)),
        shear_deg=float(rng.uniform(-max_shear, max_shear)),
        thicken=bool(rng.random() < 0.5),
        baseline_jitter=tuple(int(v) for v in rng.integers(-baseline, baseline + 1, size=len(text))),
        noise_sigma=float(rng.uniform(0, max_sigma)),
        salt_pepper=float(rng.uniform(0, max_sp)),
        ink=float(rng.uniform(0.75, 1.0)),
    )


def _scaled(glyph: np.ndarray, scale: float) -> np.ndarray:
    h = max(1, int(round(GLYPH_H * scale)))
    w = max(1, int(round(GLYPH_W * scale)))
    ys = np.minimum((np.arange(h) / scale).astype(int), GLYPH_H - 1)
    xs = np.minimum((np.arange(w) / scale).astype(int), GLYPH_W - 1)
    return glyph[np.ix_(ys, xs)]


def render_word(text: str, style: Style | None = None, rng: np.random.Generator | None = None):
    """Render ``text`` as an ink bitmap (1 = ink, 0 = paper).

    Returns (bitmap, box) where the bitmap is cropped to its ink so that the
    tight box is (0, 0, width, height) in corner form. Noise is applied only
    to ink-bearing rows/cols of that crop and never extends it.
    """
    if not text:
        raise ValueError("cannot render empty text")
    style = style or Style()
    missing = [c for c in text if c not in GLYPHS]
    if missing:
        raise ValueError(f"no glyph for {missing!r}")
    s = style.scale
    gh = int(round(GLYPH_H * s))
    gw = int(round(GLYPH_W * s))
    gap = max(1, int(round(s)))
    jit = list(style.baseline_jitter) or [0] * len(text)
    pad = max(abs(j) for j in jit) if jit else 0
    shear = np.tan(np.radians(style.shear_deg))
    extra = int(np.ceil(abs(shear) * (gh + 2 * pad))) + 2
    width = len(text) * (gw + gap) + extra
    canvas = np.zeros((gh + 2 * pad + 2, width), dtype=np.float32)
    x = extra // 2 + 1
    for ch, dy in zip(text, jit):
        g = _scaled(GLYPHS[ch], s)
        y0 = pad + 1 + dy
        canvas[y0 : y0 + g.shape[0], x : x + g.shape[1]] = np.maximum(canvas[y0 : y0 + g.shape[0], x : x + g.shape[1]], g)
        x += gw + gap
    if style.thicken:
        canvas[:, 1:] = np.maximum(canvas[:, 1:], canvas[:, :-1])
    if style.shear_deg:
        H = canvas.shape[0]
        sheared = np.zeros_like(canvas)
        for row in range(H):
            shift = int(round(shear * (H - 1 - row - (H - 1) / 2)))
            if shift >= 0:
                sheared[row, shift:] = canvas[row, : width - shift]
            else:
                sheared[row, :shift] = canvas[row, -shift:]
        canvas = sheared
    ys, xs = np.nonzero(canvas)
    bitmap = canvas[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] * style.ink
    if rng is not None and (style.noise_sigma > 0 or style.salt_pepper > 0):
        bitmap = bitmap + rng.normal(0, style.noise_sigma, bitmap.shape) * (bitmap > 0)
        flips = rng.random(bitmap.shape) < style.salt_pepper
        bitmap = np.where(flips & (bitmap > 0), 0.0, bitmap)
        bitmap = np.clip(bitmap, 0.0, 1.0).astype(np.float32)
    h, w = bitmap.shape
    return bitmap, (0, 0, w, h)
