"""Dense tensors with reverse-mode automatic differentiation.

A thin layer over numpy. Every differentiable operation records its inputs and a
closure computing input gradients from the output gradient; ``backward`` walks
the recorded operations in reverse execution order, once each, and then frees
the graph.

Training runs in float32. ``precision(np.float64)`` switches newly created
tensors to float64, which is what the finite-difference checks use.

Summation order is whatever numpy uses for a given shape and dtype (pairwise
reductions, BLAS for matmul); on a fixed machine and thread count that order is
fixed, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "EmptySelectionError",
    "GradientError",
    "Graph",
    "Tensor",
    "backward",
    "elementwise",
    "embedding",
    "get_default_dtype",
    "is_grad_enabled",
    "matmul",
    "no_grad",
    "precision",
    "rope",
    "softmax",
    "softmax_cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Invalid use of the backward pass."""


class EmptySelectionError(ValueError):
    """A reduction over selected positions received no positions."""


_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_op_counter = itertools.count()


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly created tensors."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev, _default_dtype = _default_dtype, dtype
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them for backward."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data)
        self.data = np.ascontiguousarray(arr, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self) -> None:
        backward(self)


# -- graph plumbing -------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out._seq = -1
    out._op = op
    out._consumed = False
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_op_counter)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Graph:
    """Operations reachable from a root, in execution order."""

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t._backward is None:
                if t._consumed:
                    raise GradientError("graph was already consumed by a previous backward pass")
                leaves.append(t)
            else:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes, leaves)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaves must have no pending gradient (call ``zero_grad`` between passes) and
    the graph is freed afterwards, so a second call on the same loss fails.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError("graph was already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    graph = Graph.from_root(loss)
    stale = [t.name or repr(t) for t in graph.leaves if t.grad is not None]
    if stale:
        raise GradientError(f"gradients not zeroed before backward: {', '.join(stale[:5])}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in graph.leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)

    for node in graph.nodes:
        node._parents = ()
        node._backward = None
        node._consumed = True


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("tensor exponents are not supported")
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data**p, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "pow": power,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an element-wise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown element-wise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# -- reductions and shape ops ---------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` (shape [V, d]) at integer ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding ids must lie in [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(out, (weight,), bw, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, bw, "concat")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot broadcast batch axes of {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, (a, b), bw, "matmul")


# -- fused numerically sensitive ops ------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the selected rows.

    ``logits`` has shape [n, V]; ``targets`` holds n class indices and ``mask``
    (default: all rows) selects which rows count. Rows outside the selection
    receive exactly zero gradient.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [n, V] logits, got {logits.shape}")
    n, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    sel = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if sel.shape[0] != n:
        raise DimensionError(f"{n} logit rows but selection of length {sel.shape[0]}")
    rows = np.flatnonzero(sel)
    if rows.size == 0:
        raise EmptySelectionError("cross-entropy over an empty selection")
    t = targets[rows]
    if t.min() < 0 or t.max() >= V:
        raise ValueError(f"targets must lie in [0, {V})")
    x = logits.data[rows]
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), t]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.size), t] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (g / rows.size)
        return (full,)

    return _result(out, (logits,), bw, "softmax_cross_entropy")


def rope(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate dimension pairs (2i, 2i+1) by ``pos * theta**(-2i/head_dim)``.

    ``x`` has shape [..., seq, heads, head_dim]; ``positions`` has length seq.
    """
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise DimensionError(f"rotary embedding needs an even head_dim, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if x.ndim < 3 or positions.shape[0] != x.shape[-3]:
        raise DimensionError(f"positions of length {positions.shape[0]} do not match input {x.shape}")
    inv_freq = float(theta) ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :].astype(x.dtype)
    sin = np.sin(angles)[:, None, :].astype(x.dtype)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _result(out, (x,), bw, "rope")
