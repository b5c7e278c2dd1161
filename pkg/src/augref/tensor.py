"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
(and recording is enabled) the output carries a :class:`Node` describing how
to push gradients back to its inputs. Node indices grow monotonically, so
sorting reachable nodes by index gives a valid reverse topological order.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class AxisError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(DomainError):
    pass


class DegenerateBatchError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


_counter = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable | None
    index: int = field(default_factory=lambda: next(_counter))
    released: bool = False


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.shape[0]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def max(self, axes=None):
        return reduce_max(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    needs = _recording() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


# ---------------------------------------------------------------- broadcasting


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def _binary(op: str, a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    data = fwd(a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(da(g, a.data, b.data), a.shape) if a.requires_grad else None,
            _unbroadcast(db(g, a.data, b.data), b.shape) if b.requires_grad else None,
        )

    return _make(data, op, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def hadamard(a, b) -> Tensor:
    return _binary(
        "hadamard", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def _unary(op: str, a: Tensor, data: np.ndarray, local_grad: np.ndarray) -> Tensor:
    return _make(data, op, (a,), lambda g: (g * local_grad,))


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64))


def max_with_zero(a: Tensor) -> Tensor:
    """Hinge ``max(a, 0)``; the subgradient at exactly zero is taken as 0."""
    return _unary(
        "max_with_zero", a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64)
    )


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary("sigmoid", a, s, s * (1.0 - s))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    _check_finite(data, "exp")
    return _unary("exp", a, data, data)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _unary("log", a, np.log(a.data), 1.0 / a.data)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    # NaN must survive the clamp, or a diverged model would report a finite loss
    keep = ~(a.data < floor)
    return _unary("clamp_min", a, np.where(keep, a.data, floor), keep.astype(np.float64))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "max_with_zero": max_with_zero,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "hadamard", "scalar_mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(_as_tensor(a))


# ---------------------------------------------------------------- reductions


def _norm_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axes in {list(axes)}")
    return tuple(sorted(out))


def _expand(g: np.ndarray, axes: tuple, shape: tuple) -> np.ndarray:
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a.ndim, axes)
    return _make(
        np.sum(a.data, axis=axes), "sum", (a,), lambda g: (_expand(g, axes, a.shape).copy(),)
    )


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a.ndim, axes)
    count = math.prod(a.shape[i] for i in axes)
    return _make(
        np.mean(a.data, axis=axes),
        "mean",
        (a,),
        lambda g: (_expand(g, axes, a.shape) / count,),
    )


def reduce_max(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a.ndim, axes)
    data = np.max(a.data, axis=axes)

    def backward(g):
        hit = a.data == _expand(data, axes, a.shape)
        # ties share the gradient evenly
        share = hit / np.sum(hit, axis=axes, keepdims=True)
        return (share * _expand(g, axes, a.shape),)

    return _make(data, "max", (a,), backward)


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if kind not in fns:
        raise ValueError(f"unknown reduction {kind!r}")
    return fns[kind](a, axes)


# ---------------------------------------------------------------- structure


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(data, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate on backward."""
    data = np.array(a.data[index])

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(data, "take", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(a.data @ b.data, "matmul", (a, b), backward)


def _conv(op: str, x: Tensor, w: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    d = w.ndim - 2
    if x.ndim != d + 2:
        raise ShapeError(f"{op}: input shape {x.shape} does not match kernel shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels, kernel {w.shape} expects {w.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"{op}: stride must be positive and padding nonnegative")
    ksize = w.shape[2:]
    for n, k in zip(x.shape[2:], ksize):
        if n + 2 * padding < k:
            raise ShapeError(f"{op}: kernel {ksize} larger than padded input {x.shape[2:]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"{op}: bias shape {bias.shape} != ({w.shape[0]},)")

    sp = tuple(range(2, 2 + d))
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * d)
    win = sliding_window_view(xp, ksize, axis=sp)
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * d]
    out_sp = win.shape[2 : 2 + d]
    kax = tuple(range(2 + d, 2 + 2 * d))
    out = np.tensordot(win, w.data, axes=((1,) + kax, (1,) + sp))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * d)

    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=((0,) + sp, (0,) + sp))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for offs in np.ndindex(*ksize):
                part = np.tensordot(g, w.data[(slice(None), slice(None)) + offs], axes=([1], [0]))
                part = np.moveaxis(part, -1, 1)
                sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_sp))
                gxp[(slice(None), slice(None)) + sl] += part
            crop = tuple(slice(padding, padding + n) for n in x.shape[2:])
            gx = gxp[(slice(None), slice(None)) + crop]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + sp)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, op, inputs, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``N x C_in x H x W`` with ``C_out x C_in x kh x kw``."""
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.shape}")
    return _conv("conv2d", x, kernel, bias, stride, padding)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be rank 3, got {kernel.shape}")
    return _conv("conv1d", x, kernel, bias, stride, padding)


# ---------------------------------------------------------------- normalization


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(a.ndim, [axis])
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=ax, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=ax, keepdims=True)),)

    return _make(s, "softmax", (a,), backward)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide each slice by ``max(norm, eps)``; zero slices stay zero."""
    (ax,) = _norm_axes(v.ndim, [axis])
    norm = np.sqrt(np.sum(v.data * v.data, axis=ax, keepdims=True))
    denom = np.maximum(norm, eps)
    y = v.data / denom

    def backward(g):
        radial = np.where(norm > eps, np.sum(g * y, axis=ax, keepdims=True), 0.0)
        return ((g - y * radial) / denom,)

    return _make(y, "l2_normalize", (v,), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the batch statistics are used and the running buffers are
    replaced with their momentum-averaged update (unbiased variance).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    g_ = gamma.data.reshape(bshape)

    if training:
        m = x.data.size // c
        if m <= 1:
            raise DegenerateBatchError(f"batchnorm needs more than one value per channel, got shape {x.shape}")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean.data = (1 - momentum) * running_mean.data + momentum * mean.reshape(c)
        running_var.data = (1 - momentum) * running_var.data + momentum * var.reshape(c) * m / (m - 1)
    else:
        m = None
        mean = running_mean.data.reshape(bshape)
        var = running_var.data.reshape(bshape)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * invstd
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                gx = (
                    invstd
                    / m
                    * (
                        m * dxhat
                        - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
            else:
                gx = dxhat * invstd
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, "batchnorm", (x, gamma, beta), backward)


def _bins(n: int, k: int) -> list[tuple[int, int]]:
    return [(i * n // k, -(-(i + 1) * n // k)) for i in range(k)]


def adaptive_avg_pool(x: Tensor, out: tuple[int, int]) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects N x C x H x W, got {x.shape}")
    h, w = out
    H, W = x.shape[2:]
    if not (1 <= h <= H and 1 <= w <= W):
        raise ValueError(f"invalid pooling target {out} for input {H}x{W}")
    rows, cols = _bins(H, h), _bins(W, w)
    data = np.empty(x.shape[:2] + (h, w))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i : i + 1, j : j + 1] / area
        return (gx,)

    return _make(data, "adaptive_avg_pool", (x,), backward)


# ---------------------------------------------------------------- backward pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``.

    Leaf gradients add onto any existing ``.grad``. The graph is released
    afterwards, so a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node.released:
        raise BackwardError("loss is not on the tape")

    nodes: dict[int, Node] = {}
    stack_ = [loss.node]
    while stack_:
        n = stack_.pop()
        if n.index in nodes:
            continue
        nodes[n.index] = n
        stack_.extend(t.node for t in n.inputs if t.node is not None and not t.node.released)

    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for idx in sorted(nodes, reverse=True):
        n = nodes[idx]
        g = grads.pop(id(n), None)
        if g is not None:
            for t, gi in zip(n.inputs, n.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is not None:
                    key = id(t.node)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        n.inputs = ()
        n.backward = None
        n.released = True


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
