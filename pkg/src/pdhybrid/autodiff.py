"""Minimal tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what inference uses.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(w, w))
    backward(loss, tape)
    w.grad  # -> [2., 2., 2.]
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending dimension."""

    def __init__(self, op: str, dim: str, expected, actual):
        self.op, self.dim, self.expected, self.actual = op, dim, expected, actual
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {actual}")


class TapeError(RuntimeError):
    pass


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else DEFAULT_DTYPE))
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so inputs always precede the nodes that
    consume them and reverse order is a valid topological order.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], bwd) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); higher-order gradients are not supported")
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(op, out, inputs, bwd))

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    return as_tensor(a, b), b


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _emit("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)
    return _emit("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _emit("flip", np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)
    return _emit("getitem", np.array(x.data[idx]), (x,), bwd)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit("concat", np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    return _emit("stack", np.stack([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# ----------------------------------------------------------------------------
# network ops


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))
    if kind == "tanh":
        y = np.tanh(x.data)
        return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = expit(x.data)
        return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))
    raise ValueError(f"unknown activation kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight.T + bias``."""
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError("linear", "in_features", din, x.shape[-1])
    if bias is not None and bias.shape != (dout,):
        raise ShapeError("linear", "bias", (dout,), bias.shape)
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bwd(g):
        g2 = g.reshape(-1, dout)
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, din)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", y, inputs, bwd)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation. ``x`` is [B, Cin, L]; ``weight`` is [Cout, Cin, K]."""
    if x.ndim != 3:
        raise ShapeError("conv1d", "input rank", 3, x.ndim)
    B, cin, L = x.shape
    cout, wcin, K = weight.shape
    if wcin != cin:
        raise ShapeError("conv1d", "in_channels", wcin, cin)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv1d", "bias", (cout,), bias.shape)
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    lp = L + 2 * padding
    if K > lp:
        raise ShapeError("conv1d", "kernel_size", f"<= {lp}", K)
    lout = (lp - K) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]          # B, Cin, Lout, K
    cols = np.ascontiguousarray(win.transpose(1, 3, 0, 2)).reshape(cin * K, B * lout)
    wm = weight.data.reshape(cout, cin * K)
    y = wm @ cols
    if bias is not None:
        y += bias.data[:, None]
    y = np.ascontiguousarray(y.reshape(cout, B, lout).transpose(1, 0, 2))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(cout, B * lout)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ g2).reshape(cin, K, B, lout)
            gxp = np.zeros((B, cin, lp), dtype=g.dtype)
            span = stride * (lout - 1) + 1
            for k in range(K):
                gxp[:, :, k:k + span:stride] += dcols[:, k].transpose(1, 0, 2)
            gx = gxp[:, :, padding:padding + L] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv1d", y, inputs, bwd)


def maxpool1d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over sliding windows of the last axis; ties route to the lowest index."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("maxpool1d: window and stride must be >= 1")
    B, C, L = x.shape
    if L < window:
        raise ShapeError("maxpool1d", "length", f">= {window}", L)
    if window == 2 and stride == 2:
        n = L // 2
        a, b = x.data[:, :, 0:2 * n:2], x.data[:, :, 1:2 * n:2]
        take_b = b > a

        def bwd2(g):
            gx = np.zeros_like(x.data) if L % 2 else np.empty_like(x.data)
            np.multiply(g, ~take_b, out=gx[:, :, 0:2 * n:2])
            np.multiply(g, take_b, out=gx[:, :, 1:2 * n:2])
            return (gx,)

        return _emit("maxpool1d", np.where(take_b, b, a), (x,), bwd2)
    win = sliding_window_view(x.data, window, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0].copy()
    lout = y.shape[-1]
    pos = arg + (np.arange(lout) * stride)[None, None, :]

    def bwd(g):
        gx = np.zeros_like(x.data)
        if stride >= window:
            np.put_along_axis(gx, pos, g, axis=2)
        else:
            bi, ci, _ = np.indices(pos.shape)
            np.add.at(gx, (bi, ci, pos), g)
        return (gx,)

    return _emit("maxpool1d", y, (x,), bwd)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of a [B, C, L] tensor.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    C = x.shape[1]
    if gamma.shape != (C,):
        raise ShapeError("batchnorm1d", "channels", C, gamma.shape)
    if training:
        n = x.shape[0] * x.shape[2]
        mu = x.data.mean(axis=(0, 2))
        xhat = x.data - mu[None, :, None]
        var = np.einsum("bcl,bcl->c", xhat, xhat) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
        xhat = x.data - mu[None, :, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv[None, :, None]
    y = xhat * gamma.data[None, :, None]
    y += beta.data[None, :, None]

    def bwd(g):
        gg = np.einsum("bcl,bcl->c", g, xhat)
        gb = g.sum(axis=(0, 2))
        k = (gamma.data * inv)[None, :, None]
        if training:
            n = x.shape[0] * x.shape[2]
            gx = xhat * (-gg / n)[None, :, None]
            gx += g
            gx -= (gb / n)[None, :, None]
            gx *= k
        else:
            gx = g * k
        return gx, gg, gb

    return _emit("batchnorm1d", y, (x, gamma, beta), bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity (same object) when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def bce_loss(pred: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    target = as_tensor(target)
    if pred.data.size == 0:
        raise ValueError("bce_loss: empty batch")
    if pred.shape != target.shape:
        raise ShapeError("bce_loss", "batch", pred.shape, target.shape)
    n = pred.data.size
    p = np.clip(pred.data, eps, 1.0 - eps)
    y = target.data
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def bwd(g):
        return (g * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n, None)

    return _emit("bce_loss", np.asarray(loss), (pred, target), bwd)


# ----------------------------------------------------------------------------
# recurrent cells


@dataclass
class GruParams:
    """Stacked gate weights in (update, reset, candidate) order."""
    w_x: Tensor   # [3H, Din]
    w_h: Tensor   # [3H, H]
    b: Tensor     # [3H]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


@dataclass
class LstmParams:
    """Stacked gate weights in (input, forget, cell, output) order."""
    w_x: Tensor   # [4H, Din]
    w_h: Tensor   # [4H, H]
    b: Tensor     # [4H]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


def gru_cell(x_t: Tensor | None, h_prev: Tensor, params: GruParams,
             x_proj: Tensor | None = None) -> Tensor:
    """One GRU step. ``x_proj`` may carry a precomputed ``x_t @ w_x.T + b``."""
    H = params.hidden
    if h_prev.shape[-1] != H:
        raise ShapeError("gru_cell", "hidden", H, h_prev.shape[-1])
    if x_proj is None:
        if x_t.shape[-1] != params.w_x.shape[1]:
            raise ShapeError("gru_cell", "input", params.w_x.shape[1], x_t.shape[-1])
        x_proj = linear(x_t, params.w_x, params.b)
    h_proj = linear(h_prev, params.w_h)
    z = sigmoid(x_proj[:, :H] + h_proj[:, :H])
    r = sigmoid(x_proj[:, H:2 * H] + h_proj[:, H:2 * H])
    n = tanh(x_proj[:, 2 * H:] + r * h_proj[:, 2 * H:])
    return n + z * (h_prev - n)


def lstm_cell(x_t: Tensor | None, h_prev: Tensor, c_prev: Tensor, params: LstmParams,
              x_proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
    H = params.hidden
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError("lstm_cell", "hidden", H, (h_prev.shape[-1], c_prev.shape[-1]))
    if x_proj is None:
        if x_t.shape[-1] != params.w_x.shape[1]:
            raise ShapeError("lstm_cell", "input", params.w_x.shape[1], x_t.shape[-1])
        x_proj = linear(x_t, params.w_x, params.b)
    pre = x_proj + linear(h_prev, params.w_h)
    i = sigmoid(pre[:, :H])
    f = sigmoid(pre[:, H:2 * H])
    g = tanh(pre[:, 2 * H:3 * H])
    o = sigmoid(pre[:, 3 * H:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


# ----------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor recorded on ``tape``."""
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed; double backward is not supported")
    if loss.tape_id is None or loss.tape_id >= len(tape.nodes) or tape.nodes[loss.tape_id].out is not loss:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True).reshape(inp.shape)
            else:
                inp.grad += gi
        if node.out.tape_id is not None and node.out is not loss:
            # intermediates keep their gradient but drop the closure's saved arrays
            node.backward = _spent
    return None


def _spent(g):
    raise TapeError("node already back-propagated")
