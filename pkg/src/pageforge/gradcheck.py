"""64-bit finite-difference checks for every differentiable building block."""

from __future__ import annotations

import numpy as np

from .backbone import ResBlock
from .ner import SeqTagger, reading_order
from .recog import Alphabet, ctc_loss_batch
from .roi import roi_pool
from .tensor import Conv2d, Linear, Parameter, Tensor, grad_check, log_softmax, precision, relu, tsum

TOLERANCE = {"ctc": 1e-3}
DEFAULT_TOL = 1e-4


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection keeps the check sensitive to every output entry
    return tsum(out * Tensor(w))


def check_conv(rng) -> float:
    conv = Conv2d(rng, 2, 3, 3, stride=2)
    x = Parameter(rng.normal(size=(1, 2, 5, 5)))
    w = rng.normal(size=(1, 3, 3, 3))
    return grad_check(lambda: _weighted(relu(conv(x)), w), [x, conv.weight, conv.bias])


def check_linear(rng) -> float:
    lin = Linear(rng, 4, 3)
    x = Parameter(rng.normal(size=(2, 4)))
    w = rng.normal(size=(2, 3))
    return grad_check(lambda: _weighted(lin(x), w), [x, lin.weight, lin.bias])


def check_resblock(rng) -> float:
    block = ResBlock(rng, 2, 3, 2)
    x = Parameter(rng.normal(size=(1, 2, 6, 6)))
    w = rng.normal(size=(1, 3, 3, 3))
    params = [x] + block.parameters()
    return grad_check(lambda: _weighted(block(x), w), params, max_entries=40, rng=rng)


def check_roi(rng) -> float:
    fmap = Parameter(rng.normal(size=(1, 2, 6, 8)))
    boxes = np.array([[20.0, 16.0, 30.0, 14.0], [40.0, 30.0, 20.0, 20.0]])
    w = rng.normal(size=(2, 2, 2, 4))
    return grad_check(lambda: _weighted(roi_pool(fmap, boxes, 2, 4, 8).tensor, w), [fmap])


def check_ctc(rng) -> float:
    alphabet = Alphabet("ab")
    logits = Parameter(rng.normal(size=(2, 6, alphabet.size)))
    return grad_check(lambda: ctc_loss_batch(log_softmax(logits, -1), ["ab", "a"], alphabet), [logits])


def check_seq_tagger(rng) -> float:
    tagger = SeqTagger(rng, 2, 3, hidden=4, groups=2, max_len=6)
    pooled = Parameter(rng.normal(size=(3, 2, 2, 4)))
    order = reading_order(np.array([[40.0, 10, 20, 10], [10.0, 10, 20, 10], [10.0, 40, 20, 10]]))
    w = rng.normal(size=(3, 3))
    params = [pooled] + tagger.parameters()
    return grad_check(lambda: _weighted(tagger(pooled, order), w), params, max_entries=30, rng=rng)


CHECKS = {
    "conv": check_conv,
    "linear": check_linear,
    "residual_block": check_resblock,
    "roi_pool": check_roi,
    "ctc": check_ctc,
    "seq_tagger": check_seq_tagger,
}


def run_suite(seed: int = 0) -> dict:
    """Returns {name: {"error": float, "tolerance": float, "ok": bool}}."""
    results = {}
    with precision(np.float64):
        for name, fn in CHECKS.items():
            err = float(fn(np.random.default_rng(seed)))
            tol = TOLERANCE.get(name, DEFAULT_TOL)
            results[name] = {"error": err, "tolerance": tol, "ok": err < tol}
    return results
