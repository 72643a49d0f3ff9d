"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records
a :class:`Node` holding its parents and a closure that maps the output
gradient to parent gradients. :func:`backward` visits the recorded nodes in
decreasing creation order, which is a valid reverse topological order because
a node's parents are always created before it. Using one fixed order is what
makes checkpointed and plain backward passes agree bit for bit.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericError, ShapeError

_node_ids = itertools.count()
_state = threading.local()

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def enable_grad():
    prev = _grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_default_dtype():
    return getattr(_state, "dtype", np.float64)


def set_default_dtype(dtype) -> None:
    """Select 32- or 64-bit reals for newly created tensors in this thread."""
    dtype = np.dtype(_DTYPES.get(dtype, dtype)).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _state.dtype = dtype


@contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    __slots__ = ("id", "parents", "backward_fn", "kind")

    def __init__(self, parents, backward_fn, kind):
        self.id = next(_node_ids)
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


class Tensor:
    """Dense real array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, kind: str) -> Tensor:
    _check_finite(data, kind)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(tuple(parents), backward_fn, kind)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(np.abs(bd) < np.finfo(bd.dtype).eps):
        raise NumericError("div: divisor magnitude below machine epsilon")

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _record(ad / bd, (a, b), bw, "div")


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# -- elementwise unary -----------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):    # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NumericError("log: input outside (0, inf)")
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(ad)

    def bw(g):
        if np.any(out == 0):
            raise NumericError("sqrt: gradient undefined at 0")
        return (g / (2 * out),)

    return _record(out, (a,), bw, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes where lo <= a <= hi."""
    if lo > hi:
        raise ValueError("clamp: lo > hi")
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def elementwise(op_kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch by name over the elementwise family."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "tanh": tanh, "relu": relu}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](_as_tensor(a))
    if op_kind == "clamp":
        return clamp(_as_tensor(a), kwargs.get("lo", 0.0), kwargs.get("hi", 1.0))
    raise ValueError(f"unknown op_kind {op_kind!r}")


# -- linear algebra and shape ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(g.dtype, copy=True),)

    return _record(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross-entropy of ``logits`` [B, C] against integer ``labels`` [B]."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("labels and logits disagree on batch size")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = (lse - shifted[rows, labels]).astype(z.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        return ((p * g[:, None]).astype(z.dtype),)

    return _record(out, (logits,), bw, "softmax_ce")


# -- backward ----------------------------------------------------------------

class GraphStats:
    """Counts recorded intermediates seen by backward traversals.

    ``peak_nodes`` is the largest number of non-checkpoint nodes held by any
    single traversal, i.e. the outer graph or one recomputed segment.
    """

    def __init__(self):
        self.peak_nodes = 0
        self.traversals = 0

    def observe(self, count: int) -> None:
        self.traversals += 1
        self.peak_nodes = max(self.peak_nodes, count)


@contextmanager
def track_graph():
    stats = GraphStats()
    stack = getattr(_state, "stats", [])
    _state.stats = stack + [stats]
    try:
        yield stats
    finally:
        _state.stats = stack


def _collect(root: Node):
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            pn = p._node
            if pn is not None and pn.id not in seen:
                seen[pn.id] = pn
                stack.append(pn)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def run_backward(out: Tensor, grad: np.ndarray) -> None:
    """Propagate ``grad`` (d loss / d out) to every leaf reachable from ``out``."""
    if out._node is None:
        if out.requires_grad:
            _accumulate_leaf(out, grad)
        return
    nodes = _collect(out._node)
    for stats in getattr(_state, "stats", []):
        stats.observe(sum(1 for n in nodes if n.kind != "checkpoint"))
    pending = {out._node.id: grad}
    for node in nodes:
        if node.backward_fn is None:
            raise RuntimeError("graph already consumed by a previous backward()")
        g = pending.pop(node.id, None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                _accumulate_leaf(parent, pg)
            else:
                pid = parent._node.id
                prev = pending.get(pid)
                pending[pid] = pg if prev is None else prev + pg
    for node in nodes:
        node.parents = ()
        node.backward_fn = None


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` of every requires-grad leaf; consumes the graph."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError("seed gradient shape differs from output shape")
    run_backward(loss, grad)
