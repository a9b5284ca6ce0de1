"""Reverse-mode automatic differentiation over float64 numpy arrays.

A define-by-run tape sized for this project: the handful of array ops the
policy network needs, scalar-rooted backward, and a `no_grad` switch for
pure inference. Everything runs in 64-bit so finite-difference checks can
use tight tolerances.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffUsageError",
    "Tensor",
    "backward",
    "concat",
    "exp",
    "log",
    "log_softmax",
    "no_grad",
    "pick",
    "relu",
    "softmax",
    "take_rows",
]


class AutodiffUsageError(RuntimeError):
    """Misuse of the tape API (non-scalar root, repeated backward, ...)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Array node of the tape. Leaves with requires_grad collect gradients."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_grad_fn", "_done")

    def __init__(self, value, requires_grad: bool = False):
        self.value: np.ndarray = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flags = "param" if self.requires_grad and self._grad_fn is None else ""
        return f"Tensor(shape={self.value.shape}{', ' + flags if flags else ''})"

    # -- operators ---------------------------------------------------------

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions / shape ops -------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        val = self.value.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g: np.ndarray):
            if axis is None:
                return (np.broadcast_to(g, self.value.shape),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.value.shape),)

        return _node(val, (self,), grad_fn)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def max(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        val = self.value.max(axis=axis, keepdims=keepdims)

        def grad_fn(g: np.ndarray):
            if axis is None:
                mask = (self.value == val).astype(np.float64)
                return (mask * (g / mask.sum()),)
            vv = val if keepdims else np.expand_dims(val, axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            mask = (self.value == vv).astype(np.float64)
            # ties split the gradient evenly, matching the subgradient convention
            return (mask * (gg / mask.sum(axis=axis, keepdims=True)),)

        return _node(val, (self,), grad_fn)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        val = self.value.reshape(shape)

        def grad_fn(g: np.ndarray):
            return (g.reshape(self.value.shape),)

        return _node(val, (self,), grad_fn)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise and linear ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    val = a.value + b.value

    def grad_fn(g: np.ndarray):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _node(val, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    val = a.value - b.value

    def grad_fn(g: np.ndarray):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _node(val, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    val = a.value * b.value

    def grad_fn(g: np.ndarray):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _node(val, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise AutodiffUsageError(
            f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise AutodiffUsageError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
        )
    val = a.value @ b.value

    def grad_fn(g: np.ndarray):
        return (g @ b.value.T, a.value.T @ g)

    return _node(val, (a, b), grad_fn)


def relu(x) -> Tensor:
    x = _wrap(x)
    val = np.maximum(x.value, 0.0)

    def grad_fn(g: np.ndarray):
        return (g * (x.value > 0.0),)

    return _node(val, (x,), grad_fn)


def log(x) -> Tensor:
    x = _wrap(x)
    val = np.log(x.value)

    def grad_fn(g: np.ndarray):
        return (g / x.value,)

    return _node(val, (x,), grad_fn)


def exp(x) -> Tensor:
    x = _wrap(x)
    val = np.exp(x.value)

    def grad_fn(g: np.ndarray):
        return (g * val,)

    return _node(val, (x,), grad_fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _node(s, (x,), grad_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def grad_fn(g: np.ndarray):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), grad_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    val = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.value.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _node(val, tuple(ts), grad_fn)


def take_rows(x, idx) -> Tensor:
    """Select rows x[idx] along axis 0 (gather with scatter-add backward)."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    val = x.value[idx]

    def grad_fn(g: np.ndarray):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(val, (x,), grad_fn)


def pick(x, idx) -> Tensor:
    """Per-row element selection: out[i] = x[i, idx[i]] for a 2-D tensor."""
    x = _wrap(x)
    if x.ndim != 2:
        raise AutodiffUsageError(f"pick expects a 2-D tensor, got shape {x.value.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.value.shape[0])
    val = x.value[rows, idx]

    def grad_fn(g: np.ndarray):
        gx = np.zeros_like(x.value)
        gx[rows, idx] = g
        return (gx,)

    return _node(val, (x,), grad_fn)


# -- backward engine ---------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into the .grad of every participating leaf.

    `root` must be a scalar. A second call on the same root raises; build a
    fresh graph (or use a different root of the same graph) instead.
    """
    if root.value.size != 1:
        raise AutodiffUsageError(f"backward root must be scalar, got shape {root.value.shape}")
    if root._done:
        raise AutodiffUsageError("backward was already called on this root")
    if not root.requires_grad:
        raise AutodiffUsageError("root does not depend on any parameter")
    root._done = True

    # iterative post-order topological sort over grad-requiring ancestors
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            # always produce a fresh array; backward closures may return views
            grads[id(parent)] = pg + 0.0 if prev is None else prev + pg
