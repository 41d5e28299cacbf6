"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the page reader needs are provided. Every op records a
closure that pushes the output gradient back into its parents; ``backward``
walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_factory) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward_factory(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def _backward():
            a._accum(_unbroadcast(out.grad, a.shape))
            b._accum(_unbroadcast(out.grad, b.shape))
        return _backward

    return _result(a.data + b.data, (a, b), "add", factory)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Strict same-shape add used for skip connections."""
    if a.shape != b.shape:
        raise ValueError(f"residual add needs equal shapes, got {a.shape} and {b.shape}")
    return add(a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def _backward():
            a._accum(_unbroadcast(out.grad, a.shape))
            b._accum(_unbroadcast(-out.grad, b.shape))
        return _backward

    return _result(a.data - b.data, (a, b), "sub", factory)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def _backward():
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
            b._accum(_unbroadcast(out.grad * a.data, b.shape))
        return _backward

    return _result(a.data * b.data, (a, b), "mul", factory)


def square(x: Tensor) -> Tensor:
    def factory(out):
        def _backward():
            x._accum(2.0 * x.data * out.grad)
        return _backward

    return _result(x.data * x.data, (x,), "square", factory)


def exp(x: Tensor) -> Tensor:
    def factory(out):
        def _backward():
            x._accum(out.data * out.grad)
        return _backward

    return _result(np.exp(x.data), (x,), "exp", factory)


def log(x: Tensor) -> Tensor:
    def factory(out):
        def _backward():
            x._accum(out.grad / x.data)
        return _backward

    return _result(np.log(x.data), (x,), "log", factory)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def factory(out):
        def _backward():
            x._accum(out.grad * mask)
        return _backward

    return _result(x.data * mask, (x,), "relu", factory)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    s[~pos] = ez / (1.0 + ez)

    def factory(out):
        def _backward():
            x._accum(out.grad * out.data * (1.0 - out.data))
        return _backward

    return _result(s, (x,), "sigmoid", factory)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    res = shifted - lse

    def factory(out):
        def _backward():
            g = out.grad
            x._accum(g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))
        return _backward

    return _result(res, (x,), "log_softmax", factory)


# -- reductions and shape -------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    def factory(out):
        def _backward():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.shape))
        return _backward

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), "sum", factory)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def factory(out):
        def _backward():
            g = out.grad / n
            if axis is not None:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.shape))
        return _backward

    return _result(np.asarray(x.data.mean(axis=axis)), (x,), "mean", factory)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def factory(out):
        def _backward():
            x._accum(out.grad.reshape(x.shape))
        return _backward

    return _result(x.data.reshape(shape), (x,), "reshape", factory)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def factory(out):
        def _backward():
            x._accum(out.grad.transpose(inv))
        return _backward

    return _result(x.data.transpose(axes), (x,), "transpose", factory)


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatters with np.add.at."""

    def factory(out):
        def _backward():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accum(g)
        return _backward

    return _result(x.data[idx], (x,), "index", factory)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    return index(x, rows)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def factory(out):
        def _backward():
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                t._accum(g)
        return _backward

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", factory)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def pad_rows(x: Tensor, length: int) -> Tensor:
    """Zero-pad (or keep) the first axis up to ``length``."""
    n = x.shape[0]
    if n == length:
        return x
    pad = np.zeros((length - n,) + x.shape[1:], dtype=x.data.dtype)
    return concat([x, Tensor(pad)], axis=0)


# -- layers ---------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    parents = (x, W) if b is None else (x, W, b)

    def factory(out):
        def _backward():
            g = out.grad.reshape(-1, W.shape[1])
            x._accum((g @ W.data.T).reshape(x.shape))
            W._accum(x2.T @ g)
            if b is not None:
                b._accum(g.sum(axis=0))
        return _backward

    return _result(y.reshape(lead + (W.shape[1],)), parents, "linear", factory)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation via im2col; ``padding`` is an int or (ph, pw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    N, C, H, W = x.shape
    K, _, kh, kw = weight.shape
    ph, pw = _pair(padding)
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: input {x.shape} too small for weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) flattened to rows
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(K, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    y = y.reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def factory(out):
        def _backward():
            g = out.grad.transpose(0, 2, 3, 1).reshape(-1, K)
            if weight.requires_grad:
                weight._accum((g.T @ cols).reshape(weight.shape))
            if bias is not None:
                bias._accum(g.sum(axis=0))
            if x.requires_grad:
                dcols = (g @ wmat).reshape(N, Ho, Wo, C, kh, kw)
                dxp = np.zeros(xp.shape, dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                x._accum(dxp[:, :, ph : ph + H, pw : pw + W])
        return _backward

    return _result(np.ascontiguousarray(y), parents, "conv2d", factory)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """x: [N, C, L], weight: [K, C, k]."""
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(weight, (weight.shape[0], weight.shape[1], 1, weight.shape[2]))
    y = conv2d(x4, w4, bias, stride=1, padding=(0, padding))
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


def upsample_nearest2x(x: Tensor) -> Tensor:
    N, C, H, W = x.shape

    def factory(out):
        def _backward():
            x._accum(out.grad.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))
        return _backward

    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(y, (x,), "upsample2x", factory)


# -- losses with fused gradients ------------------------------------------

def binary_cross_entropy(p: Tensor, y: np.ndarray, weight: np.ndarray, eps: float = 1e-7) -> Tensor:
    """sum(weight * CE(p, y)) with p clipped to [eps, 1 - eps]."""
    pc = np.clip(p.data, eps, 1.0 - eps)
    ce = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    total = np.asarray((weight * ce).sum())
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def factory(out):
        def _backward():
            g = weight * (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside
            p._accum(out.grad * g)
        return _backward

    return _result(total, (p,), "bce", factory)


def nll(logp: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets over rows where mask is set."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logp.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = max(int(mask.sum()), 1)
    rows = np.arange(n)
    picked = logp.data[rows, targets] * mask
    val = np.asarray(-picked.sum() / count)

    def factory(out):
        def _backward():
            g = np.zeros_like(logp.data)
            g[rows, targets] = -mask.astype(logp.data.dtype) / count
            logp._accum(out.grad * g)
        return _backward

    return _result(val, (logp,), "nll", factory)


# -- parameters and modules -------------------------------------------------

class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Attribute-registered container; parameter order follows assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(_DTYPE)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, padding=None):
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout, dtype=_DTYPE))
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv1d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3):
        self.weight = Parameter(he_normal(rng, (cout, cin, k), cin * k))
        self.bias = Parameter(np.zeros(cout, dtype=_DTYPE))
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.padding)


class Linear(Module):
    def __init__(self, rng, din: int, dout: int):
        self.weight = Parameter(he_normal(rng, (din, dout), din))
        self.bias = Parameter(np.zeros(dout, dtype=_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# -- optimisation -----------------------------------------------------------

def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """p <- p - lr * grad, then clear grads. Every parameter must carry a gradient."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {getattr(p, 'name', '') or '<unnamed>'} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = 1.0
        if self.clip_norm:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = state["t"]
        self.m = [a.copy() for a in state["m"]]
        self.v = [a.copy() for a in state["v"]]


class SGD:
    """Plain SGD with optional momentum, wrapping :func:`sgd_step` semantics."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, momentum: float = 0.0,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        if self.clip_norm:
            norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params))
            if norm > self.clip_norm:
                for p in self.params:
                    p.grad *= self.clip_norm / norm
        if self.momentum:
            for p, b in zip(self.params, self.buf):
                b *= self.momentum
                b += p.grad
                p.grad = b.copy()
        sgd_step(self.params, self.lr)

    def state(self) -> dict:
        return {"buf": [b.copy() for b in self.buf]}

    def load_state(self, state: dict) -> None:
        self.buf = [b.copy() for b in state["buf"]]


# -- verification -----------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode grads and central differences.

    ``f`` rebuilds the graph from ``params`` on every call. Relative error is
    |a - n| / max(|a| + |n|, floor) per entry; the floor keeps entries whose true
    gradient is ~0 from dividing round-off by round-off.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors; build them under precision(np.float64)")
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            with no_grad():
                up = float(f().data)
            flat[i] = old - eps
            with no_grad():
                down = float(f().data)
            flat[i] = old
            num = (up - down) / (2 * eps)
            an = a.reshape(-1)[i]
            err = abs(an - num) / max(abs(an) + abs(num), floor)
            worst = max(worst, err)
    return worst
