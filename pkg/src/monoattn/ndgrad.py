"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every trainable computation in the package is built from the ops below.  A
graph is recorded while ops run; :func:`backward` walks it in reverse creation
order and returns a table mapping node id to gradient.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class GradCheckError(ValueError):
    pass


class Tensor:
    """A graph node: value, gradient slot and the parents it was computed from."""

    __slots__ = ("id", "op", "parents", "value", "_grad", "_backward", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = np.asarray(value, dtype=DTYPE)
        self._grad = None
        self._backward = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def parent_ids(self) -> tuple:
        return tuple(p.id for p in self.parents)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def __repr__(self):
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording parents (evaluation and decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(op: str, value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, True, op, tuple(parents), backward_fn)
    return Tensor(value, False, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _node("subtract", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def scale(a, c: float) -> Tensor:
    a = constant(a)
    c = float(c)
    return _node("scale", a.value * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("multiply", a, b)
    av, bv = a.value, b.value
    return _node("multiply", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("divide", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _node("divide", out, (a, b), backward)


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.value > 0
    # subgradient 0 at exactly 0
    return _node("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def max_with_zero(a) -> Tensor:
    """``max(a, 0)``; the hinge used by the monotonicity loss."""
    a = constant(a)
    mask = a.value > 0
    return _node("max-with-zero", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError("matrix-multiply", av.shape, bv.shape)
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError("matrix-multiply", av.shape, bv.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        if bv.ndim == 2 and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node("matrix-multiply", out, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = constant(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = constant(a)
    shape = a.shape
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _node("index", a.value[idx], (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (rows by default)."""
    ts = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat-rows", *[t.shape for t in ts]) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node("concat-rows", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (shape [V, d]) for an integer id array."""
    table = constant(table)
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding-gather", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding-gather: id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _node("embedding-gather", table.value[ids], (table,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n) if n else sum(a, axis, keepdims)


# ---------------------------------------------------------------------------
# Normalization, softmax, loss
# ---------------------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis (each row normalized)."""
    a = constant(a)
    y = _softmax(a.value)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node("row-softmax", y, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError("layer-norm", x.shape, gamma.shape, beta.shape)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value
    n = xv.shape[-1]

    def backward(g):
        dxhat = g * gv
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node("layer-norm", xhat * gv + beta.value, (x, gamma, beta), backward)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Summed (optionally weighted) negative log-likelihood of integer targets.

    ``logits`` has shape [..., V]; ``targets`` and ``weights`` have the leading shape.
    """
    logits = constant(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross-entropy-with-logits", logits.shape, targets.shape)
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
    if w.shape != targets.shape:
        raise ShapeError("cross-entropy-with-logits", targets.shape, w.shape)
    x = logits.value
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(x, targets[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    out = np.asarray((nll * w).sum())

    def backward(g):
        p = np.exp(x - lse)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (w * g)[..., None],)

    return _node("cross-entropy-with-logits", out, (logits,), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) to every node reachable from ``loss``.

    Returns a table of node id to gradient and stores each gradient on its node.
    Nodes not reachable from ``loss`` keep a zero gradient.
    """
    if loss.value.size != 1 or loss.ndim > 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    order = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(p for p in node.parents if p.requires_grad and p.id not in seen)
    # ids grow monotonically, so descending id is a valid reverse topological order
    order.sort(key=lambda n: n.id, reverse=True)

    grads = {loss.id: np.ones_like(loss.value)}
    for node in order:
        g = grads.get(node.id)
        node.grad = g if g is not None else np.zeros_like(node.value)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences.  ``f`` maps a Tensor to a scalar Tensor.

    Callers are responsible for keeping ``x`` away from kinks of piecewise ops.
    """
    x = np.array(x, dtype=DTYPE)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.value)):
        raise GradCheckError("f returned a non-finite value")
    analytic = backward(out).get(xt.id, np.zeros_like(x))

    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(Tensor(x.copy())).value)
        flat[k] = orig - eps
        fm = float(f(Tensor(x.copy())).value)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"f returned a non-finite value at coordinate {k}")
        fd = (fp - fm) / (2 * eps)
        err = abs(analytic.reshape(-1)[k] - fd) / max(1e-8, abs(fd))
        worst = max(worst, err)
    return worst
