"""Reverse-mode differentiation over dense float64 arrays.

Operations execute eagerly on numpy arrays and record their inputs; calling
``backward`` on a scalar result walks the recorded nodes in reverse
topological order. Leading batch dimensions are supported everywhere, which
lets several independent networks share one pass (``matmul`` broadcasts like
``np.matmul``).
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "AutodiffError", "ShapeError", "NumericError", "StateError",
    "Tensor", "ParamSet", "Graph", "grad_check", "as_tensor",
    "matmul", "add", "sub", "mul", "div", "neg", "affine", "elu", "relu",
    "exp", "log", "square", "sum", "mean", "softmax", "logsumexp",
    "normal_logpdf", "concat", "cumsum", "gather", "where", "reshape",
    "ndtr", "ndtri", "getitem", "permute",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_ids = itertools.count()


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(AutodiffError, FloatingPointError):
    """An operation produced NaN or infinity."""


class StateError(AutodiffError, RuntimeError):
    """Graph methods called in the wrong order."""


class Tensor:
    """Array value plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

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
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def label(self) -> str:
        return self.name or self.op

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = f"{op}#{next(_ids)}"
    # a sum is non-finite iff some element is (or the values are ~1e308)
    if not math.isfinite(data.sum()):
        inputs = ", ".join(p.label() for p in parents)
        raise NumericError(f"non-finite output at node '{out.op}' (inputs: {inputs})")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def primitive(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Define a fused operation by its output and vector-Jacobian products.

    ``vjp(g)`` must return one gradient array (or ``None``) per parent.
    """
    parents = [as_tensor(p) for p in parents]

    def bw(g):
        for p, pg in zip(parents, vjp(g)):
            if pg is not None:
                _accumulate(p, pg)

    return _node(np.asarray(data, dtype=np.float64), parents, bw, op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


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
        raise ShapeError(f"{op}: cannot broadcast {a.label()}{a.shape} with {b.label()}{b.shape}") from None


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.label()}{a.shape} @ {b.label()}{b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(data, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g / b.data)
        if b.requires_grad:
            _accumulate(b, -g * data / b.data)

    return _node(data, (a, b), bw, "div")


def neg(x) -> Tensor:
    return affine(x, -1.0, 0.0)


def affine(x, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with python-scalar coefficients."""
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, g * scale)

    return _node(x.data * scale + shift, (x,), bw, "affine")


def elu(x) -> Tensor:
    x = as_tensor(x)
    # exp(min(x, 0)) is the derivative everywhere; e - 1 >= x for x < 0
    e = np.exp(np.minimum(x.data, 0.0))
    data = np.maximum(x.data, e - 1.0)

    def bw(g):
        _accumulate(x, g * e)

    return _node(data, (x,), bw, "elu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        _accumulate(x, g * pos)

    return _node(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * data)

    return _node(data, (x,), bw, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def bw(g):
        _accumulate(x, g / x.data)

    return _node(data, (x,), bw, "log")


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, g * 2.0 * x.data)

    return _node(x.data * x.data, (x,), bw, "square")


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, np.array(_expand(g, x.shape, axis, keepdims)))

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError(f"mean over empty axis of {x.label()}{x.shape}")

    def bw(g):
        _accumulate(x, np.array(_expand(g, x.shape, axis, keepdims)) / n)

    return _node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (x,), bw, "softmax")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    full = m + np.log(s)
    data = full if keepdims else np.squeeze(full, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, g * np.exp(x.data - full))

    return _node(np.asarray(data), (x,), bw, "logsumexp")


def normal_logpdf(x) -> Tensor:
    """Standard-normal log density, elementwise."""
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, -g * x.data)

    return _node(-0.5 * x.data * x.data - _LOG_SQRT_2PI, (x,), bw, "normal_logpdf")


def ndtr(x) -> Tensor:
    """Standard-normal CDF."""
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, g * np.exp(-0.5 * x.data * x.data - _LOG_SQRT_2PI))

    return _node(special.ndtr(x.data), (x,), bw, "ndtr")


def ndtri(p) -> Tensor:
    """Standard-normal quantile (probit)."""
    p = as_tensor(p)
    data = special.ndtri(p.data)

    def bw(g):
        _accumulate(p, g * np.exp(0.5 * data * data + _LOG_SQRT_2PI))

    return _node(data, (p,), bw, "ndtri")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]} ({exc})") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _node(data, ts, bw, "concat")


def cumsum(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _node(np.cumsum(x.data, axis=axis), (x,), bw, "cumsum")


def gather(x, index: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with a constant integer index array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    try:
        data = np.take_along_axis(x.data, index, axis=axis)
    except (ValueError, IndexError) as exc:
        raise ShapeError(f"gather: {x.label()}{x.shape} with index {index.shape} ({exc})") from None

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            shape = np.broadcast_shapes(full.shape[:axis % x.ndim] + (1,) + full.shape[axis % x.ndim + 1:],
                                        index.shape)
            idx = np.broadcast_to(index, shape)
            grid = list(np.indices(idx.shape, sparse=True))
            grid[axis % x.ndim] = idx
            np.add.at(full, tuple(grid), np.broadcast_to(g, shape))
            _accumulate(x, full)

    return _node(data, (x,), bw, "gather")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    # untaken branches may hold inf/nan; they never reach the output
    data = np.where(cond, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.where(cond, g, 0.0))
        if b.requires_grad:
            _accumulate(b, np.where(cond, 0.0, g))

    return _node(data, (a, b), bw, "where")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {x.label()}{x.shape} -> {shape}") from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(data, (x,), bw, "reshape")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    data = np.array(x.data[index])
    basic = _is_basic(index)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            _accumulate(x, full)

    return _node(data, (x,), bw, "getitem")


def permute(x, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder ``x`` along ``axis`` by per-slice permutations ``perm``.

    ``perm`` has the shape of ``x`` up to and including ``axis``; every slice
    along ``axis`` must be a permutation.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    perm = np.asarray(perm, dtype=np.intp)
    trailing = (1,) * (x.ndim - axis - 1)
    idx = perm.reshape(perm.shape + trailing)
    inverse = np.argsort(perm, axis=-1).reshape(perm.shape + trailing)
    try:
        data = np.take_along_axis(x.data, idx, axis=axis)
    except (ValueError, IndexError) as exc:
        raise ShapeError(f"permute: {x.label()}{x.shape} with {perm.shape} ({exc})") from None

    def bw(g):
        _accumulate(x, np.take_along_axis(g, inverse, axis=axis))

    return _node(data, (x,), bw, "permute")


# ------------------------------------------------------------------ backward

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> list[Tensor]:
    """Accumulate d(root)/d(node) into ``.grad`` of every differentiable node.

    Returns the visited nodes in topological order.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    if not root.requires_grad:
        return order
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    return order


# ------------------------------------------------------------------ params

class ParamSet:
    """Named trainable tensors. Gradients live on each tensor's ``.grad``."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(np.sum([t.size for t in self._params.values()]))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._params.items()}

    def flat(self) -> np.ndarray:
        """One contiguous buffer that every parameter's ``data`` is a view into.

        Rebinds the tensors on first use; in-place updates of the buffer update
        all parameters at once.
        """
        buf = getattr(self, "_flat", None)
        if buf is not None and all(t.data.base is buf for t in self._params.values()):
            return buf
        buf = np.concatenate([t.data.ravel() for t in self._params.values()]) if self._params \
            else np.zeros(0)
        pos = 0
        for t in self._params.values():
            n = t.data.size
            t.data = buf[pos:pos + n].reshape(t.data.shape)
            pos += n
        self._flat = buf
        return buf

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([(t.grad if t.grad is not None else np.zeros(t.data.shape)).ravel()
                               for t in self._params.values()])

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def copy(self) -> ParamSet:
        return ParamSet({k: t.data.copy() for k, t in self._params.items()})

    def equal(self, other: ParamSet) -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
                   for a, b in zip(self._params.values(), other._params.values()))


# ------------------------------------------------------------------- graph

class Graph:
    """A computation rebuilt from ``fn`` on each forward pass.

    ``fn`` receives one keyword argument per binding. Bindings named in ``wrt``
    (and any ``Tensor`` bindings that already require gradients, such as
    parameters) are differentiable.
    """

    def __init__(self, fn: Callable[..., Tensor], wrt: Iterable[str] = ()):
        self.fn = fn
        self.wrt = set(wrt)
        self.nodes: list[Tensor] = []
        self.root: Tensor | None = None
        self.leaves: dict[str, Tensor] = {}
        self._backward_done = False

    def forward(self, bindings: Mapping[str, object]) -> Tensor:
        leaves = {}
        for name, value in bindings.items():
            if isinstance(value, Tensor):
                leaves[name] = value
            else:
                leaves[name] = Tensor(np.array(value, dtype=np.float64),
                                      requires_grad=name in self.wrt, name=name)
        root = as_tensor(self.fn(**leaves))
        self.leaves = leaves
        self.root = root
        self.nodes = _topological(root) if root.requires_grad else [root]
        self._backward_done = False
        return root

    def backward(self) -> dict[str, np.ndarray]:
        if self.root is None:
            raise StateError("backward called before forward")
        for leaf in self.leaves.values():
            if leaf.requires_grad:
                leaf.grad = None
        backward(self.root)
        self._backward_done = True
        return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                for name, leaf in self.leaves.items() if leaf.requires_grad}


def grad_check(fn: Callable[..., Tensor], point: Mapping[str, np.ndarray],
               step: float = 1e-5) -> float:
    """Worst relative error between backward and central finite differences.

    ``fn`` takes keyword tensors and returns a scalar. Every entry of ``point``
    is treated as differentiable.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    graph = Graph(fn, wrt=point)
    graph.forward(point)
    analytic = graph.backward()

    def value(bindings):
        out = as_tensor(fn(**{k: Tensor(v) for k, v in bindings.items()}))
        v = float(out.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError("non-finite evaluation at perturbed point")
        return v

    worst = 0.0
    for name, base in point.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus = dict(point)
            minus = dict(point)
            hi = flat.copy()
            lo = flat.copy()
            hi[i] += step
            lo[i] -= step
            plus[name] = hi.reshape(base.shape)
            minus[name] = lo.reshape(base.shape)
            numeric = (value(plus) - value(minus)) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
