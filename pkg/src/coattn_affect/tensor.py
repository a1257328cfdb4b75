"""Dense float64 tensors with a define-by-run gradient tape.

Ops only record while a :class:`GradTape` is active on the current thread and
at least one input requires a gradient, so inference simply runs outside a
tape. Typical use::

    with GradTape() as tape:
        loss = ccc_loss(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DoubleBackward, EmptyTape, NonFiniteError, NonScalarLoss, ShapeMismatch

_local = threading.local()
_debug = False


def set_debug(enabled: bool) -> None:
    """Scan every op output for NaN/Inf (slow; off by default)."""
    global _debug
    _debug = bool(enabled)


@contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    previous = _debug
    set_debug(enabled)
    try:
        yield
    finally:
        set_debug(previous)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array of float64 values that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeMismatch(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLoss(f"expected a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out, inputs, backward, name):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


class GradTape:
    """Ordered record of differentiable ops; replays them once in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if not self.nodes:
            raise EmptyTape("nothing was recorded on this tape")
        if self._consumed:
            raise DoubleBackward("tape already replayed; call reset() before reuse")
        self._consumed = True

        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Replay the tape that produced ``loss``."""
    if loss._tape is None:
        raise EmptyTape("loss was not produced on a gradient tape")
    loss._tape.backward(loss)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], fn: Callable, name: str) -> Tensor:
    if _debug and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced NaN or Inf")
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), fn, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), back, "div")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        arr = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(arr, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeMismatch(f"slice [{start}, {stop}) out of range for axis of length {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), (x,), back, "slice_axis")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    try:
        arr = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(arr, tensors, back, "concat")


# -- reductions ----------------------------------------------------------------

def _axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % x.ndim for a in axis)


def _expand(g: np.ndarray, x: Tensor, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x.shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(x, axis)

    def back(g):
        return (np.array(_expand(g, x, axes, keepdims)),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))

    def back(g):
        return (_expand(g, x, axes, keepdims) / n,)

    return _result(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), back, "mean")


def var(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    axes = _axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    centered = x.data - np.mean(x.data, axis=axes, keepdims=True)

    def back(g):
        return (_expand(g, x, axes, keepdims) * (2.0 / n) * centered,)

    out = np.mean(centered * centered, axis=axes, keepdims=keepdims)
    return _result(out, (x,), back, "var")


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, inputs, back, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row max for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor | None = None, shift: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    d = x.shape[-1]
    for p in (gain, shift):
        if p is not None and p.shape != (d,):
            raise ShapeMismatch(f"layer_norm parameter {p.shape} does not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat if gain is None else xhat * gain.data
    if shift is not None:
        out = out + shift.data
    inputs = [x] + [p for p in (gain, shift) if p is not None]

    def back(g):
        gxhat = g if gain is None else g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(x.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if shift is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out, inputs, back, "layer_norm")


# -- convolution ---------------------------------------------------------------

def conv1d_causal(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal convolution of a (C_in, T) signal with (C_out, C_in, K) taps.

    The input is left-padded with (K-1)*dilation zeros, so output length is T and
    ``y[:, t]`` only sees ``x[:, t - j*dilation]`` for j in [0, K). Tap ``w[..., K-1]``
    multiplies the current step.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeMismatch(f"conv1d_causal expects (C_in, T) and (C_out, C_in, K), "
                            f"got {x.shape} and {w.shape}")
    c_in, steps = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ShapeMismatch(f"conv1d_causal: input has {c_in} channels, weight expects {w_in}")
    d = int(dilation)
    pad = (k - 1) * d
    xp = np.pad(x.data, ((0, 0), (pad, 0)))
    cols = np.stack([xp[:, j * d: j * d + steps] for j in range(k)], axis=1).reshape(c_in * k, steps)
    w2 = w.data.reshape(c_out, c_in * k)

    def back(g):
        gw = (g @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g).reshape(c_in, k, steps)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j * d: j * d + steps] += gcols[:, j]
            gx = gxp[:, pad:]
        return gx, gw

    return _result(w2 @ cols, (x, w), back, "conv1d_causal")


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation of (N, C, H, W) with (O, C, kh, kw) filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {wc}")
    p = int(padding)
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", cols, w.data, optimize=True)

    def back(g):
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j],
                                                               optimize=True)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return _result(out, (x, w), back, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes; ties route to the first max."""
    if x.ndim < 2:
        raise ShapeMismatch(f"maxpool2d needs at least 2 axes, got {x.shape}")
    h, wd = x.shape[-2:]
    if h % size or wd % size:
        raise ShapeMismatch(f"maxpool2d: spatial size {h}x{wd} not divisible by {size}")
    offsets = [(a, b) for a in range(size) for b in range(size)]
    parts = [x.data[..., a::size, b::size] for a, b in offsets]
    out = parts[0]
    for part in parts[1:]:
        out = np.maximum(out, part)

    def back(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (a, b), part in zip(offsets, parts):
            hit = (part == out) & ~taken
            gx[..., a::size, b::size] = np.where(hit, g, 0.0)
            taken |= hit
        return (gx,)

    return _result(out.copy(), (x,), back, "maxpool2d")
