"""Dense arrays with reverse-mode automatic differentiation.

A thin layer over numpy. Every differentiable op produces a new ``Tensor``
that remembers its parents and a closure mapping the output adjoint to the
parent adjoints. ``backward`` sorts the graph topologically and replays those
closures in reverse.

Index-group reductions (``scatter_add``, ``segment_max``) run sequentially in
the order of the index array so results are reproducible bit for bit, and the
2-D matmul uses numpy's einsum loop rather than BLAS because BLAS blocking
makes a row's result depend on its position in the matrix.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def _check_finite(data: np.ndarray, op: str) -> None:
    # a finite sum proves every entry finite; only an overflowing sum needs the full scan
    if data.dtype.kind == "f" and not math.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), backward, "sqrt")


def tabs(a: Tensor) -> Tensor:
    # sign(0) = 0: the L1 sub-gradient at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


ACTIVATIONS = {"silu": silu, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


# -- linear algebra -------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 2 and b.ndim == 2:
        return np.einsum("ik,kj->ij", a, b)
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        _mm(a.data, b.data),
        (a, b),
        lambda g: (_mm(g, b.data.T), _mm(a.data.T, g)),
        "matmul",
    )


# -- reductions -----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(
        np.asarray(out),
        (a,),
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),),
        "sum",
    )


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise ValueError("mean over an empty axis")
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if a.size == 0:
        raise ValueError("max over an empty array")
    if axis is None:
        flat = a.data.reshape(-1)
        k = int(np.argmax(flat))
        out = flat[k].reshape((1,) * a.ndim if keepdims else ())

        def backward(g):
            full = np.zeros(a.size, dtype=a.dtype)
            full[k] = g.reshape(-1)[0]
            return (full.reshape(a.shape),)

        return _make(np.array(out), (a,), backward, "max")

    k = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, k, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        # the adjoint goes to the first maximiser only
        np.put_along_axis(full, k, g, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), backward, "max")


def l1_norm(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return tsum(tabs(a), axis, keepdims)


def l2_norm(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return sqrt(tsum(a * a, axis, keepdims))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


# -- shape manipulation -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


# -- index-map ops ------------------------------------------------------------------

def _check_index(index: np.ndarray, bound: int, what: str) -> np.ndarray:
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise ValueError(f"{what}: index must be a 1-D integer array")
    if index.size and (index.min() < 0 or index.max() >= bound):
        raise IndexError(f"{what}: index out of range [0, {bound})")
    return index


def _scatter(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def gather(a: Tensor, index) -> Tensor:
    """Rows of ``a`` picked by ``index``: out[i] = a[index[i]]."""
    index = _check_index(index, a.shape[0], "gather")
    n = a.shape[0]
    return _make(a.data[index], (a,), lambda g: (_scatter(g, index, n),), "gather")


def scatter_add(a: Tensor, index, n: int) -> Tensor:
    """Segment sum: out[k] = sum of a[i] over i with index[i] == k.

    Accumulation follows the order of ``index``.
    """
    index = _check_index(index, n, "scatter_add")
    if len(index) != a.shape[0]:
        raise ValueError("scatter_add: index length must match leading dimension")
    return _make(_scatter(a.data, index, n), (a,), lambda g: (g[index],), "scatter_add")


def segment_max(a: Tensor, index, n: int) -> Tensor:
    """Segment max over the leading axis; the adjoint goes to the first maximiser."""
    index = _check_index(index, n, "segment_max")
    if len(index) != a.shape[0]:
        raise ValueError("segment_max: index length must match leading dimension")
    out = np.full((n,) + a.shape[1:], -np.inf, dtype=a.dtype)
    np.maximum.at(out, index, a.data)
    if n and np.isneginf(out).any():
        raise ValueError("segment_max: empty segment")

    def backward(g):
        hit = (a.data == out[index]).reshape(len(index), -1)
        rows = np.arange(len(index))[:, None]
        cand = np.where(hit, rows, len(index))
        first = np.full((n, hit.shape[1]), len(index))
        np.minimum.at(first, index, cand)
        mask = (cand == first[index]).reshape(a.shape)
        return (np.where(mask, g[index], 0.0),)

    return _make(out, (a,), backward, "segment_max")


def segment_softmax(a: Tensor, index, n: int) -> Tensor:
    """Softmax over rows sharing the same ``index`` value, per column.

    The per-segment max used for stabilisation is treated as a constant;
    softmax is shift invariant so the gradient is unaffected.
    """
    index = _check_index(index, n, "segment_softmax")
    m = np.full((n,) + a.shape[1:], -np.inf, dtype=a.dtype)
    np.maximum.at(m, index, a.data)
    e = exp(a - Tensor(m[index]))
    z = scatter_add(e, index, n)
    return e / gather(z, index)


# -- backward -----------------------------------------------------------------------

class Tape:
    """Reverse-ordered record of the graph reachable from a loss.

    ``nodes`` is in reverse topological order (loss first). ``grads`` maps
    ``id(tensor)`` to its accumulated adjoint.
    """

    def __init__(self, nodes: list[Tensor], grads: dict[int, np.ndarray]):
        self.nodes = nodes
        self.grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> Tape:
    """Propagate d(loss)/d(node) through the graph.

    Leaves that require grad get ``.grad`` set (accumulating onto any existing
    value). When ``params`` is given, those reached by nothing get a zero grad.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo_order(loss) if loss.requires_grad else []
    order.reverse()
    for node in order:
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = _unbroadcast(pg, p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg.astype(p.dtype, copy=True) if prev is None else prev + pg
    for node in order:
        if not node._parents and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return Tape(order, grads)
