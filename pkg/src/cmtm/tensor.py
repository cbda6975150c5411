"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the result remembers its parents and a closure that maps the
upstream gradient to one gradient per parent. :func:`backward` orders the
recorded nodes into a :class:`Tape` and replays it once in reverse.

Ops accept leading batch dimensions where that is natural (matmul, softmax,
layer_norm, concat along rows); the two-dimensional case is the contract.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, UsageError

DEFAULT_DTYPE = np.float32

# Finite-output assertion on every op; off unless requested (costly).
_CHECK_FINITE = os.environ.get("CMTM_DEBUG", "") not in ("", "0")

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """An n-dimensional float array with an optional gradient tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            dtype = data.dtype if dtype is None else dtype
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def astype(self, dtype):
        """Detached copy in another float precision."""
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def detach(self):
        return Tensor(self.data, dtype=self.dtype, name=self.name)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from {backward.__qualname__.split('.')[0]}")
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _make(x.data * s, (x,), backward)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; gradients follow the selection."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        )

    return _make(out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t**2) * dinner),)

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_backward(g, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        # looked up at call time so tests can inject a faulty rule
        return _matmul_backward(g, a.data, b.data)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match {c} channels"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(
                "concat: shapes " + ", ".join(str(u.shape) for u in tensors) + f" disagree off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` above ``b`` along the token (second-to-last) axis."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: channel mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=-2)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), backward)


def split_rows(x: Tensor, n: int):
    """Inverse of :func:`concat_rows`: first ``n`` rows and the remainder."""
    rows = x.shape[-2]
    return slice_axis(x, 0, n, axis=x.ndim - 2), slice_axis(x, n, rows, axis=x.ndim - 2)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell of a ``(..., H, W, C)`` map ``factor`` times per axis."""
    *lead, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=-3), factor, axis=-2)

    def backward(g):
        g = g.reshape(*lead, h, factor, w, factor, c)
        return (g.sum(axis=(-4, -2)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``targets``."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g * (p - y) / n,)

    return _make(np.asarray(per.mean(), dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the nodes reachable from one loss.

    Parents always precede children in :attr:`nodes`; :meth:`run` walks it
    backwards exactly once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes
        self._used = False

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf]

    def run(self, seed_grad: np.ndarray):
        if self._used:
            raise UsageError("tape already replayed; tapes are single-use")
        self._used = True
        for leaf in self.leaves():
            leaf.grad = np.zeros_like(leaf.data)
        grads = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad += g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    Leaf gradients are reset to zero first, then accumulated over every path.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("this graph was already differentiated; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    if tape is None:
        tape = Tape.from_loss(loss)
    tape.run(np.ones_like(loss.data))
    return tape


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
