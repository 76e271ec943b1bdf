"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. Graphs are single-use: ``backward`` frees
the closures it ran, so a second call on the same root raises ``GraphError``.

Broadcasting is never implicit. Elementwise binary ops require equal shapes,
except that either operand may be a 0-d scalar. Use ``broadcast_to`` to expand
a tensor on purpose; its backward reduces the gradient again.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ids = itertools.count()

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class DiffTensor:
    """A value plus (after ``backward``) its gradient.

    Leaves created with ``requires_grad=True`` are parameters; interior nodes
    get ``requires_grad`` if any parent does.
    """

    __slots__ = ("values", "grad", "parents", "backward_fn", "op", "node_id",
                 "name", "requires_grad", "consumed")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["DiffTensor", ...] = (), backward_fn: Callable | None = None,
                 op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.node_id = next(_ids)
        self.name = name
        self.requires_grad = requires_grad
        self.consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(op={self.op}, shape={self.shape}{tag})"

    # operator sugar; all routes go through the explicit ops below
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

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def constant(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=False, op="const")


def parameter(values, name: str) -> DiffTensor:
    return DiffTensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def _lift(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return constant(x)


def _node(values: np.ndarray, parents: tuple[DiffTensor, ...], backward_fn, op: str) -> DiffTensor:
    req = any(p.requires_grad for p in parents)
    return DiffTensor(values, requires_grad=req, parents=parents if req else (),
                      backward_fn=backward_fn if req else None, op=op)


def _check_elementwise(op: str, a: DiffTensor, b: DiffTensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape, detail="no implicit broadcasting; use broadcast_to")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.values + b.values, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.values - b.values, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("mul", a, b)
    av, bv = a.values, b.values
    return _node(av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)), "mul")


def div(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_reduce_to(g / bv, av.shape), _reduce_to(-g * out / bv, bv.shape)),
                 "div")


def scalar_mul(x: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return _node(x.values * c, (x,), lambda g: (g * c,), "scalar_mul")


def log(x: DiffTensor) -> DiffTensor:
    xv = x.values
    return _node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def exp(x: DiffTensor) -> DiffTensor:
    out = np.exp(x.values)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def clip_min(x: DiffTensor, floor: float) -> DiffTensor:
    """``max(x, floor)``; gradient passes only where ``x > floor``."""
    keep = x.values > floor
    return _node(np.where(keep, x.values, floor), (x,), lambda g: (g * keep,), "clip_min")


def gelu(x: DiffTensor) -> DiffTensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xv = x.values
    x2 = xv * xv
    t = np.tanh(GELU_C * xv * (1.0 + GELU_K * x2))
    out = 0.5 * xv * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x2)
        return (g * d,)

    return _node(out, (x,), back, "gelu")


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.values.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (x,), back, "sum")


def tensor_mean(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    axes = _norm_axis(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return scalar_mul(tensor_sum(x, axes, keepdims), 1.0 / n)


def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    shape_in = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", shape_in, tuple(shape)) from None
    return _node(out, (x,), lambda g: (g.reshape(shape_in),), "reshape")


def transpose(x: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad axes {axes}")
    inv = np.argsort([a % x.ndim for a in axes])
    return _node(x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: DiffTensor) -> DiffTensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    shape = tuple(shape)
    shape_in = x.shape
    try:
        out = np.broadcast_to(x.values, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", shape_in, shape) from None
    return _node(out, (x,), lambda g: (_reduce_to(g, shape_in),), "broadcast_to")


def getitem(x: DiffTensor, index) -> DiffTensor:
    """Basic indexing only (ints, slices, Ellipsis, None)."""
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer))):
            raise TypeError(f"getitem supports basic indexing only, got {type(i).__name__}")
    shape_in = x.shape

    def back(g):
        full = np.zeros(shape_in)
        full[index] = g
        return (full,)

    return _node(x.values[index], (x,), back, "getitem")


def concat(xs: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    xs = [_lift(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, x.shape, detail=f"axis={axis}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.values for x in xs], axis=ax)
    return _node(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def where(mask: np.ndarray, x: DiffTensor) -> DiffTensor:
    """``x`` where ``mask`` else exactly 0; mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("where", mask.shape, x.shape)
    return _node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "where")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> DiffTensor:
    """``a @ b`` for a: (..., n, k). b is (..., k, m) with the same leading
    dims as ``a``, or a plain (k, m) matrix shared across ``a``'s leading dims."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="leading dims differ")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            k, m = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _node(av @ bv, (a, b), back, "matmul")


# ---------------------------------------------------------------- fused nn ops

def softmax_lastdim(x: DiffTensor) -> DiffTensor:
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), back, "softmax")


def log_softmax_lastdim(x: DiffTensor) -> DiffTensor:
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def back(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), back, "log_softmax")


def layernorm(x: DiffTensor, gamma: DiffTensor, beta: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last axis; gamma/beta have shape (D,)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gamma.values
    out = xhat * gv + beta.values

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gv
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), back, "layernorm")


# ---------------------------------------------------------------- backward

def _topo_order(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffTensor, params: Mapping[str, DiffTensor] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Returns ``{name: gradient}``. With ``params`` given, every entry is
    present and parameters the loss does not reach get exact zeros; without
    it, only named leaves reached from the loss are returned.
    """
    if loss.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise GraphError("backward already ran on this graph; rebuild it with a new forward pass")
    loss.consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    order = _topo_order(loss) if loss.requires_grad else [loss]
    for node in reversed(order):
        g = grads.get(node.node_id)
        node.grad = g
        if node.backward_fn is None or g is None:
            continue
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg if prev is None else prev + pg
        if node is not loss:
            # single-use graph: drop the closure and its captured arrays
            node.backward_fn = None
            node.parents = ()
    loss.backward_fn = None
    loss.parents = ()

    out: dict[str, np.ndarray] = {}
    if params is None:
        for node in order:
            if node.name is not None and not node.parents and node.grad is not None:
                out[node.name] = node.grad
        return out
    for name, p in params.items():
        g = grads.get(p.node_id)
        if g is None:
            p.grad = np.zeros(p.shape)
            out[name] = p.grad
        else:
            out[name] = np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


def named_leaves(tensors: Iterable[DiffTensor]) -> dict[str, DiffTensor]:
    return {t.name: t for t in tensors if t.name is not None}
