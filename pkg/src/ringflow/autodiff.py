"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation on a :class:`Tensor` that needs a gradient is appended to the
active :class:`Tape`.  :func:`backward` walks the tape in exact reverse
recording order, so repeated backward passes over one tape are bitwise
reproducible.

Elementwise ops only broadcast a size-1 operand against a tensor.  Anything
else must go through :func:`expand` explicitly.

Kinks: ``relu``, ``maximum`` and ``clamp`` use a one-sided subgradient of 0 at
the boundary (the input is treated as inactive), so gradient checks should
sample away from those points.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class DomainError(ValueError):
    """An op was evaluated outside its real domain (e.g. log of a negative)."""


class Tape:
    """Ordered record of the primitive ops of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, t: Tensor) -> None:
        t._node_id = len(self.nodes)
        t._tape = self
        self.nodes.append(t)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.tapes.pop()
        return False


class _State:
    def __init__(self):
        self.tapes: list[Tape] = [Tape()]
        self.enabled = True


_STATE = _State()


def current_tape() -> Tape:
    return _STATE.tapes[-1]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results never require grad."""
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def grad_enabled() -> bool:
    return _STATE.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_node_id", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._node_id: int | None = None
        self._tape: Tape | None = None
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
    def is_leaf(self) -> bool:
        return self._node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op result and record it on the active tape.

    ``backward(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent.  This is the extension point for new primitives.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.op = op
    out.name = None
    out._node_id = None
    out._tape = None
    out.requires_grad = _STATE.enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        current_tape().record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _binary_operands(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return make_node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return make_node(ad @ bd, (a, b), backward, "matmul")


def sparse_matmul(m, x) -> Tensor:
    """Constant (scipy sparse or dense) matrix times a tensor."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError("sparse_matmul", m.shape, x.shape)
    mt = m.T
    return make_node(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),), "sparse_matmul")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean")


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets, in row order."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape != a.shape[:1]:
        raise ShapeError("segment_sum", a.shape, ids.shape)
    return make_node(scatter_add(ids, a.data, num_segments), (a,), lambda g: (np.take(g, ids, axis=0),), "segment_sum")


def scatter_add(ids: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Deterministic ``out[ids[k]] += values[k]`` (sequential in k)."""
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n)
    flat = values.reshape(len(values), -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(ids, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + values.shape[1:])


# ---------------------------------------------------------------- elementwise

def _unary(a, fwd, dfwd, op):
    a = as_tensor(a)
    x = a.data
    y = fwd(x)
    return make_node(y, (a,), lambda g: (g * dfwd(x, y),), op)


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def elu(a) -> Tensor:
    def fwd(x):
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))

    return _unary(a, fwd, lambda x, y: np.where(x > 0, 1.0, y + 1.0), "elu")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    return _unary(a, lambda x: np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))),
                  lambda x, y: _sigmoid(x), "softplus")


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: {int(np.sum(a.data <= 0))} non-positive input(s), min {a.data.min()!r}")
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: {int(np.sum(a.data < 0))} negative input(s), min {a.data.min()!r}")
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def arccos(a) -> Tensor:
    a = as_tensor(a)
    if np.any(np.abs(a.data) > 1.0):
        raise DomainError(f"arccos: input outside [-1, 1], extreme {a.data[np.argmax(np.abs(a.data))]!r}")
    return _unary(a, np.arccos, lambda x, y: -1.0 / np.sqrt(np.maximum(1.0 - x * x, 1e-300)), "arccos")


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent."""
    p = float(p)
    a = as_tensor(a)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError(f"power: negative base with fractional exponent {p}")
    if p == 2.0:
        return _unary(a, np.square, lambda x, y: 2.0 * x, "power")
    return _unary(a, lambda x: x ** p, lambda x, y: p * x ** (p - 1.0), "power")


def maximum(a, c: float) -> Tensor:
    """max(a, c) against a constant; gradient 0 at a == c."""
    return _unary(a, lambda x: np.maximum(x, c), lambda x, y: (x > c).astype(np.float64), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min of two tensors; ties route the gradient to ``a``."""
    a, b = _binary_operands("minimum", a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(out, (a, b), lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), sa),
                                             _unbroadcast(np.where(pick_a, 0.0, g), sb)), "minimum")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    return _unary(a, lambda x: np.clip(x, lo_, hi_),
                  lambda x, y: ((x > lo_) & (x < hi_)).astype(np.float64), "clamp")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask."""
    a, b = _binary_operands("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    out_shape = a.shape if a.data.size >= b.data.size else b.shape
    if mask.shape != out_shape:
        raise ShapeError("where", mask.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_node(np.where(mask, a.data, b.data), (a, b),
                     lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                                _unbroadcast(np.where(mask, 0.0, g), sb)), "where")


# ---------------------------------------------------------------- vectors

def _inner(x: np.ndarray, y: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    # einsum avoids the (N, 3) temporary; much faster than sum(x * y) on thin rows
    if x.ndim == 2 and axis in (-1, 1):
        out = np.einsum("ij,ij->i", x, y)
        return out[:, None] if keepdims else out
    return np.sum(x * y, axis=axis, keepdims=keepdims)


def dot(a, b, axis: int = -1) -> Tensor:
    """Inner product along ``axis`` (rows of matching shape)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        g = np.expand_dims(g, axis)
        return g * bd, g * ad

    return make_node(_inner(ad, bd, axis), (a, b), backward, "dot")


def l2_norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient at the zero vector is 0."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt(_inner(x, x, axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(np.where(n > 0, g / safe, 0.0), axis) * x,)

    return make_node(n, (a,), backward, "l2_norm")


def normalize(a, axis: int = -1, eps: float = 0.0) -> Tensor:
    """x / max(|x|, eps) along ``axis``."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt(_inner(x, x, axis, keepdims=True))
    if eps <= 0 and np.any(n == 0):
        raise DomainError("normalize: zero-length vector")
    d = np.maximum(n, eps)
    y = x / d
    active = n > eps

    def backward(g):
        proj = _inner(g, y, axis, keepdims=True)
        return (np.where(active, (g - y * proj) / d, g / d),)

    return make_node(y, (a,), backward, "normalize")


def cross(a, b) -> Tensor:
    """Cross product of (..., 3) rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError("cross", a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_node(np.cross(ad, bd), (a, b),
                     lambda g: (np.cross(bd, g), np.cross(g, ad)), "cross")


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[k] != ts[0].shape[k] for k in range(t.ndim) if k != ax):
            raise ShapeError("concat", *(u.shape for u in ts))
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(ts)))

    return make_node(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", *(t.shape for t in ts))
    return make_node(np.stack([t.data for t in ts], axis=axis), ts,
                     lambda g: tuple(np.take(g, k, axis=axis) for k in range(len(ts))), "stack")


def slice_(a, idx) -> Tensor:
    """Basic indexing (ints, slices, ellipsis).  Use :func:`take` for gathers."""
    a = as_tensor(a)
    shape = a.shape
    key = idx if isinstance(idx, tuple) else (idx,)
    if any(isinstance(k, (np.ndarray, list)) for k in key):
        raise TypeError("slice: advanced indexing is not supported, use take()")
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", shape) from exc

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_node(np.array(out, dtype=np.float64), (a,), backward, "slice")


def take(a, indices: np.ndarray) -> Tensor:
    """Gather rows ``a[indices]`` along axis 0; adjoint is a scatter-add."""
    a = as_tensor(a)
    ids = np.asarray(indices, dtype=np.intp)
    n = a.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError("take", a.shape, ids.shape)
    flat = ids.reshape(-1)

    def backward(g):
        return (scatter_add(flat, g.reshape((-1,) + a.shape[1:]), n),)

    return make_node(np.take(a.data, ids, axis=0), (a,), backward, "take")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", old, tuple(shape)) from exc
    return make_node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError("expand", old, shape) from exc
    lead = len(shape) - len(old)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(k for k, s in enumerate(old) if s == 1 and g.shape[k] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return make_node(out, (a,), backward, "expand")


def column(a, width: int) -> Tensor:
    """Turn an (N,) tensor into (N, width) by repeating it across columns."""
    a = as_tensor(a)
    return expand(reshape(a, (a.shape[0], 1)), (a.shape[0], width))


def mul_rows(a, s) -> Tensor:
    """Scale row k of an (N, k) tensor by ``s[k]``; same as ``a * column(s, k)`` but fused."""
    a, s = as_tensor(a), as_tensor(s)
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError("mul_rows", a.shape, s.shape)
    ad, sd = a.data, s.data

    def backward(g):
        return g * sd[:, None], np.einsum("ij,ij->i", g, ad)

    return make_node(ad * sd[:, None], (a, s), backward, "mul_rows")


# ---------------------------------------------------------------- backward

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires-grad leaf.

    Leaf gradients accumulate across calls; call :func:`zero_grad` between
    independent passes.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    root.grad = np.ones_like(root.data)
    if not root.requires_grad:
        return
    if root.is_leaf:
        return
    nodes = root._tape.nodes
    if root._node_id >= len(nodes) or nodes[root._node_id] is not root:
        raise RuntimeError("backward: root is not on its tape (tape was cleared?)")
    pending: dict[int, np.ndarray] = {root._node_id: np.ones_like(root.data)}
    for k in range(root._node_id, -1, -1):
        g = pending.pop(k, None)
        if g is None:
            continue
        node = nodes[k]
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node_id is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = pending.get(parent._node_id)
                pending[parent._node_id] = pg if prev is None else prev + pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_err: float
    worst_index: tuple | None
    tol: float
    checked: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    failures: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.checked} coords, worst rel err {self.worst_rel_err:.3e} "
                f"at {self.worst_index} (tol {self.tol:g})")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-4,
               n_samples: int | None = None, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` with central differences.

    ``x`` must be a requires-grad leaf; its data is perturbed in place and
    restored.  The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  With ``n_samples`` only that many
    randomly chosen coordinates are checked.
    """
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    saved_grad = x.grad
    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    g_tape = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    coords = list(np.ndindex(x.shape)) if x.shape else [()]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    analytic, numeric, failures = [], [], []
    worst, worst_idx = 0.0, None
    with no_grad():
        for idx in coords:
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = f(x).item()
            x.data[idx] = orig - h
            fm = f(x).item()
            x.data[idx] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(g_tape[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            analytic.append(ana)
            numeric.append(num)
            if not math.isfinite(err) or err > tol:
                failures.append((idx, ana, num, err))
            if not math.isfinite(err) or err > worst:
                worst, worst_idx = (err if math.isfinite(err) else math.inf), idx
    return GradCheckReport(passed=not failures, worst_rel_err=worst, worst_index=worst_idx, tol=tol,
                           checked=len(coords), analytic=np.array(analytic), numeric=np.array(numeric),
                           failures=failures)
