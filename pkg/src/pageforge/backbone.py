"""Residual feature extractor, feature pyramid and receptive-field arithmetic."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import Conv2d, Module, Tensor, relu, residual_add, upsample_nearest2x

PYRAMID_STRIDES = (8, 16, 32, 64, 128)
FULL_SCALE_CHANNELS = (64, 64, 128, 256, 512)
DESK_CHANNELS = (8, 16, 32, 48, 64)


@dataclass
class BackboneConfig:
    block_channels: tuple = DESK_CHANNELS
    convs_per_block: int = 2
    fpn_channels: int = 48
    desk_scale: bool = True
    rf_fixture: str | None = None

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != 5:
            raise ValueError(f"backbone needs exactly 5 blocks, got {len(self.block_channels)}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        return cls(FULL_SCALE_CHANNELS, 2, 256, desk_scale=False, rf_fixture="rf_fullscale.json")

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if d.get("desk_scale", True) is False and "block_channels" not in d:
            d["block_channels"] = FULL_SCALE_CHANNELS
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass
class PyramidFeatures:
    maps: list  # P3..P7
    strides: tuple = PYRAMID_STRIDES

    @property
    def finest(self) -> Tensor:
        return self.maps[0]

    def shapes(self) -> list[tuple[int, int]]:
        return [m.shape[2:] for m in self.maps]


class ResBlock(Module):
    """First conv halves the resolution; a strided 1x1 projection carries the skip."""

    def __init__(self, rng, cin: int, cout: int, n_convs: int):
        self.convs = [Conv2d(rng, cin, cout, 3, stride=2)]
        self.convs += [Conv2d(rng, cout, cout, 3) for _ in range(n_convs - 1)]
        self.proj = Conv2d(rng, cin, cout, 1, stride=2, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.convs) - 1:
                y = relu(y)
        return relu(residual_add(y, self.proj(x)))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = (1,) + cfg.block_channels
        self.blocks = [ResBlock(rng, chans[i], chans[i + 1], cfg.convs_per_block) for i in range(5)]
        f = cfg.fpn_channels
        self.lateral = [Conv2d(rng, c, f, 1, padding=0) for c in cfg.block_channels[2:]]
        self.smooth = [Conv2d(rng, f, f, 3) for _ in range(3)]
        self.p6 = Conv2d(rng, f, f, 3, stride=2)
        self.p7 = Conv2d(rng, f, f, 3, stride=2)

    def __call__(self, image: Tensor) -> PyramidFeatures:
        return extract(image, self)


def extract(image: Tensor, net: Backbone) -> PyramidFeatures:
    if image.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"expected a [1, 1, H, W] grayscale page, got {image.shape}")
    H, W = image.shape[2:]
    if H % 128 or W % 128:
        raise ValueError(f"page size {H}x{W} must be divisible by 128; pad the page first")
    c = image
    feats = []
    for block in net.blocks:
        c = block(c)
        feats.append(c)
    c3, c4, c5 = feats[2:]
    t5 = net.lateral[2](c5)
    t4 = net.lateral[1](c4) + upsample_nearest2x(t5)
    t3 = net.lateral[0](c3) + upsample_nearest2x(t4)
    p3, p4, p5 = (net.smooth[i](t) for i, t in enumerate((t3, t4, t5)))
    p6 = net.p6(p5)
    p7 = net.p7(relu(p6))
    return PyramidFeatures([p3, p4, p5, p6, p7])


# -- receptive field --------------------------------------------------------

@dataclass
class LayerGeom:
    k: int
    s: float
    r: float = 0
    j: float = 0
    name: str = ""


def receptive_field(layers: list[LayerGeom]) -> tuple:
    """Unroll r_out = r_in + (k - 1) * j_in, j_out = j_in * s from r = j = 1.

    Fills each layer's ``r`` and ``j`` with its output values and returns the
    final pair. ``s`` may be fractional (0.5 models nearest 2x upsampling).
    """
    r, j = 1, 1
    for i, layer in enumerate(layers):
        if layer.k <= 0 or layer.s <= 0:
            raise ValueError(f"layer {i} ({layer.name or 'unnamed'}) has non-positive k or s")
        r = r + (layer.k - 1) * j
        j = j * layer.s
        layer.r, layer.j = r, j
    if float(j).is_integer():
        j = int(j)
    return int(r), j


def p3_layers(cfg: BackboneConfig) -> list[LayerGeom]:
    """Deepest path into P3 of this architecture (C5 lateral, two upsamplings, smoothing)."""
    layers = []
    for b in range(5):
        layers.append(LayerGeom(3, 2, name=f"block{b + 1}.conv1"))
        layers += [LayerGeom(3, 1, name=f"block{b + 1}.conv{i + 2}") for i in range(cfg.convs_per_block - 1)]
    layers += [LayerGeom(1, 1, name="lateral5"), LayerGeom(1, 0.5, name="up5"), LayerGeom(1, 0.5, name="up4"),
               LayerGeom(3, 1, name="smooth3")]
    return layers


def load_layer_fixture(path: str | Path) -> list[LayerGeom]:
    p = Path(path)
    if not p.exists():
        p = Path(str(resources.files("pageforge.data").joinpath(str(path))))
    doc = json.loads(p.read_text())
    if doc.get("version") != 1:
        raise ValueError(f"unsupported layer fixture version {doc.get('version')!r}")
    return [LayerGeom(int(l["k"]), l["s"], name=l.get("name", "")) for l in doc["layers"]]


def layers_for_config(cfg: BackboneConfig, base_dir: Path | None = None) -> list[LayerGeom]:
    if cfg.rf_fixture:
        candidate = Path(cfg.rf_fixture)
        if base_dir is not None and not candidate.is_absolute() and (base_dir / candidate).exists():
            candidate = base_dir / candidate
        return load_layer_fixture(candidate)
    return p3_layers(cfg)
