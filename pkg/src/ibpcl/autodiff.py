"""Tape-style reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` stamped with a monotonically
increasing node id, so parents always precede children and the reverse pass
is a plain sort by id. The graph is rebuilt for every minibatch.

Broadcasting is deliberately narrow: an operand may be a scalar (python number
or 0-d tensor) or have exactly the other operand's shape. Anything else raises
:class:`ShapeError`; layer code reshapes explicitly via :func:`repeat_rows`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ibpcl import special

_ids = itertools.count()


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value in output")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), op: str = "leaf",
                 backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, op=op, backward_fn=backward_fn)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if _is_scalar(t) and np.ndim(g) > 0:
        g = np.sum(g)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _check_binary(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)


def backward(loss: Tensor):
    """Populate ``.grad`` on every node that requires it, seeding d loss/d loss = 1."""
    if loss.data.ndim != 0:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes or not t.requires_grad:
            continue
        nodes[t.id] = t
        stack.extend(t.parents)
    for t in nodes.values():
        t.grad = None
    loss.grad = np.array(1.0)
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        if t.backward_fn is not None and t.grad is not None:
            t.backward_fn(t.grad)


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``wrt`` (zeros where unused)."""
    backward(loss)
    return [w.grad if w.grad is not None else np.zeros_like(w.data) for w in wrt]


# --- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return _make("div", out, (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("maximum", a, b)
    take_a = a.data >= b.data

    def bw(g):
        _accumulate(a, np.where(take_a, g, 0.0))
        _accumulate(b, np.where(take_a, 0.0, g))

    return _make("maximum", np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("minimum", a, b)
    take_a = a.data <= b.data

    def bw(g):
        _accumulate(a, np.where(take_a, g, 0.0))
        _accumulate(b, np.where(take_a, 0.0, g))

    return _make("minimum", np.minimum(a.data, b.data), (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make("matmul", a.data @ b.data, (a, b), bw)


# --- elementwise unary --------------------------------------------------------

def _unary(op: str, a, out: np.ndarray, dfn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * dfn(out))

    return _make(op, out, (a,), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: _accumulate(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make("pow", a.data ** p, (a,), lambda g: _accumulate(a, g * p * a.data ** (p - 1.0)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _unary("exp", a, out, lambda out: out)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: _accumulate(a, g / a.data))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _unary("sigmoid", a, special.expit(a.data), lambda out: out * (1.0 - out))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    return _make("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: _accumulate(a, g * s))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(-a.data)
    return _make("log_sigmoid", -np.logaddexp(0.0, -a.data), (a,), lambda g: _accumulate(a, g * s))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: _accumulate(a, np.where(pos, g, 0.0)))


def log1mexp(a) -> Tensor:
    """log(1 - exp(a)) for a < 0, stable at both ends."""
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))

    def bw(g):
        _accumulate(a, g * (-1.0 / np.expm1(-x)))

    return _make("log1mexp", out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, np.where(inside, g, 0.0)))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _make("lgamma", special.gammaln(a.data), (a,), lambda g: _accumulate(a, g * special.digamma(a.data)))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    return _make("digamma", special.digamma(a.data), (a,), lambda g: _accumulate(a, g * special.trigamma(a.data)))


# --- reductions and shape ops ---------------------------------------------------

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum(a, axis) * (1.0 / n)


def cumsum(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("cumsum (1-d only)", a.shape)
    return _make("cumsum", np.cumsum(a.data), (a,), lambda g: _accumulate(a, np.cumsum(g[::-1])[::-1]))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: _accumulate(a, np.reshape(g, a.shape)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.data.T, (a,), lambda g: _accumulate(a, g.T))


def repeat_rows(a, n: int) -> Tensor:
    """Stack a length-K vector into an (n, K) matrix."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("repeat_rows", a.shape)
    out = np.tile(a.data, (n, 1))
    return _make("repeat_rows", out, (a,), lambda g: _accumulate(a, g.sum(axis=0)))


def colmax(a) -> Tensor:
    """Column-wise max of a 2-d tensor; gradient flows to the first argmax."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError("colmax", a.shape)
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])

    def bw(g):
        full = np.zeros(a.shape)
        full[idx, cols] = g
        _accumulate(a, full)

    return _make("colmax", a.data[idx, cols], (a,), bw)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, piece)

    return _make("concat", out, tuple(parts), bw)


# --- likelihoods -----------------------------------------------------------------

def categorical_loglik(logits, labels) -> Tensor:
    """Sum over rows of log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("categorical_loglik", logits.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)

    def bw(g):
        d = -np.exp(logp)
        d[rows, labels] += 1.0
        _accumulate(logits, g * d)

    return _make("categorical_loglik", np.asarray(logp[rows, labels].sum()), (logits,), bw)


def bernoulli_loglik(logits, targets) -> Tensor:
    """Sum of log Bernoulli(targets | sigmoid(logits)); targets may be fractional."""
    logits = as_tensor(logits)
    x = np.asarray(targets, dtype=np.float64)
    if x.shape != logits.shape:
        raise ShapeError("bernoulli_loglik", logits.shape, x.shape)
    out = np.sum(x * logits.data - np.logaddexp(0.0, logits.data))
    p = special.expit(logits.data)
    return _make("bernoulli_loglik", np.asarray(out), (logits,), lambda g: _accumulate(logits, g * (x - p)))


# --- finite differences -----------------------------------------------------------

def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. the array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
