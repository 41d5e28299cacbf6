"""Word transcription branch: column classifier, CTC loss and greedy decoding."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .tensor import Conv2d, Linear, Module, Tensor, _result, log_softmax, mean, relu, reshape, transpose

BLANK = 0
BLANK_CHAR = "-"
# Returned for targets no alignment can produce; such boxes get no gradient.
INFEASIBLE_LOSS = 1000.0
warnings = Counter()

DEFAULT_SYMBOLS = string.ascii_lowercase + string.digits + "/"


@dataclass(frozen=True)
class Alphabet:
    symbols: str = DEFAULT_SYMBOLS

    def __post_init__(self):
        if BLANK_CHAR in self.symbols:
            raise ValueError(f"{BLANK_CHAR!r} is reserved for the blank")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def size(self) -> int:
        """Output classes including the blank."""
        return len(self.symbols) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self.symbols.index(ch) + 1 for ch in text]
        except ValueError:
            bad = [ch for ch in text if ch not in self.symbols]
            raise ValueError(f"characters {bad!r} are not in the alphabet") from None

    def decode(self, indices) -> str:
        return "".join(BLANK_CHAR if i == BLANK else self.symbols[i - 1] for i in indices)


def collapse(path: str, blank: str = BLANK_CHAR) -> str:
    """Merge repeated symbols, then drop blanks."""
    out = []
    prev = None
    for ch in path:
        if ch != prev and ch != blank:
            out.append(ch)
        prev = ch
    return "".join(out)


def greedy_decode(lattice, alphabet: Alphabet) -> str:
    lp = lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice)
    return collapse(alphabet.decode(lp.argmax(axis=-1)))


def min_frames(labels) -> int:
    """Shortest lattice that can emit ``labels``: one frame each plus a blank between repeats."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _lse(*arrs):
    m = np.maximum.reduce(arrs)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = sum(np.exp(a - safe) for a in arrs)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(s), -np.inf)


def _ctc_core(logp: np.ndarray, labels: list[list[int]]):
    """Batched log-space forward-backward.

    logp: [B, T, V]. Returns per-sequence -ln p and d(-ln p)/d logp.
    """
    B, T, V = logp.shape
    S = max(2 * len(l) + 1 for l in labels)
    ext = np.zeros((B, S), dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    skip = np.zeros((B, S), dtype=bool)  # may enter state s from s - 2
    for b, l in enumerate(labels):
        n = 2 * len(l) + 1
        ext[b, 1:n:2] = l
        valid[b, :n] = True
        for s in range(3, n, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2).astype(np.float64)
    emit[~np.broadcast_to(valid[:, None, :], emit.shape)] = -np.inf

    def shift_right(a, k):
        out = np.full_like(a, -np.inf)
        if k < a.shape[1]:
            out[:, k:] = a[:, : a.shape[1] - k]
        return out

    def shift_left(a, k):
        out = np.full_like(a, -np.inf)
        if k < a.shape[1]:
            out[:, : a.shape[1] - k] = a[:, k:]
        return out

    alpha = np.full((B, T, S), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        p1 = shift_right(prev, 1)
        p2 = np.where(skip, shift_right(prev, 2), -np.inf)
        alpha[:, t] = _lse(prev, p1, p2) + emit[:, t]

    last = np.array([2 * len(l) for l in labels])
    beta = np.full((B, T, S), -np.inf)  # excludes the emission at t
    rows = np.arange(B)
    beta[rows, T - 1, last] = 0.0
    has_label = last > 0
    beta[rows[has_label], T - 1, last[has_label] - 1] = 0.0
    skip_next = np.zeros_like(skip)  # s -> s + 2 allowed
    skip_next[:, : max(S - 2, 0)] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        n1 = shift_left(nxt, 1)
        n2 = np.where(skip_next, shift_left(nxt, 2), -np.inf)
        beta[:, t] = np.where(valid, _lse(nxt, n1, n2), -np.inf)

    end = alpha[rows, T - 1, last]
    end2 = np.where(has_label, alpha[rows, T - 1, np.maximum(last - 1, 0)], -np.inf)
    logprob = _lse(end, end2)
    occ = np.exp(alpha + beta - logprob[:, None, None])
    occ[~np.isfinite(occ)] = 0.0
    onehot = np.zeros((B, S, V))
    onehot[rows[:, None], np.arange(S)[None, :], ext] = valid
    grad = -np.einsum("bts,bsv->btv", occ, onehot)
    return -logprob, grad


def ctc_loss_batch(lattices: Tensor, targets: list, alphabet: Alphabet | None = None) -> Tensor:
    """Mean CTC loss over a batch of [B, T, V] log-probability lattices."""
    B, T, V = lattices.shape
    labels = [alphabet.encode(t) if isinstance(t, str) else list(t) for t in targets]
    if len(labels) != B:
        raise ValueError(f"{B} lattices but {len(labels)} targets")
    if B == 0:
        return Tensor(0.0)
    feasible = np.array([min_frames(l) <= T for l in labels])
    losses = np.full(B, INFEASIBLE_LOSS)
    grad = np.zeros((B, T, V))
    if (~feasible).any():
        warnings["ctc_infeasible"] += int((~feasible).sum())
    idx = np.flatnonzero(feasible)
    if idx.size:
        l, g = _ctc_core(lattices.data[idx], [labels[i] for i in idx])
        losses[idx] = l
        grad[idx] = g
    total = np.asarray(losses.mean())
    grad /= B

    def factory(out):
        def _backward():
            lattices._accum((out.grad * grad).astype(lattices.data.dtype))
        return _backward

    return _result(total, (lattices,), "ctc", factory)


def ctc_loss(lattice: Tensor, target, alphabet: Alphabet | None = None) -> Tensor:
    """-ln p(target | lattice) for one [T, V] log-probability lattice."""
    T, V = lattice.shape
    return ctc_loss_batch(reshape(lattice, (1, T, V)), [target], alphabet)


class RecogHead(Module):
    """Two conv blocks over the pooled crop, height averaged, then a per-column classifier."""

    def __init__(self, rng, in_channels: int, alphabet: Alphabet, channels: int = 64):
        self.conv1 = Conv2d(rng, in_channels, channels, 3)
        self.conv2 = Conv2d(rng, channels, channels, 3)
        self.fc = Linear(rng, channels, alphabet.size)

    def __call__(self, pooled: Tensor) -> Tensor:
        """pooled: [B, C, pH, pW] -> log-probabilities [B, pW, |alphabet| + 1]."""
        x = relu(self.conv1(pooled))
        x = relu(self.conv2(x))
        x = mean(x, axis=2)  # [B, C, pW]
        x = transpose(x, (0, 2, 1))
        return log_softmax(self.fc(x), axis=-1)


def recog_forward(head: RecogHead, pooled: Tensor) -> Tensor:
    return head(pooled)
