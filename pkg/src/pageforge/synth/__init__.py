"""Synthetic handwritten-like pages with word boxes, transcriptions and tags."""

from .generator import GenConfig, PageSample, Word, gen_dataset, gen_page, load_page, load_split, page_rng
from .glyphs import Style, render_word

__all__ = ["GenConfig", "PageSample", "Word", "gen_dataset", "gen_page", "load_page", "load_split", "page_rng",
           "Style", "render_word"]
