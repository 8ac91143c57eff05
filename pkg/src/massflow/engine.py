"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array together with its tape record: the primitive
kind that produced it, the parent tensors, and one vector-Jacobian closure per
parent. Graphs are rebuilt on every forward pass (define-by-run); there is no
graph caching. ``backward(loss)`` walks the DAG once in reverse topological
order, summing each node's gradient over all of its consumers, and returns the
gradient for every reachable gradient-enabled leaf.

Conventions
-----------
* All data is float64. Inputs of any other dtype are converted on entry.
* Tensors are value-like: no primitive mutates an input array.
* A tape belongs to one thread. Tensors may be shared read-only.
* ``no_grad()`` suspends recording; ops then return plain leaf tensors.

Column-normalizing primitives (``softmax_columns``, ``l1_normalize_columns``)
treat a 1-D input as a single column and a 2-D input column by column; the
``*_rows`` variants normalize 2-D inputs row by row. An exactly-zero column
under L1 normalization falls back to the uniform vector (and propagates a zero
gradient, since the output is locally constant there).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "constant",
    "no_grad",
    "backward",
    "finite_difference_gradient",
    "primitive_forward",
    "PRIMITIVES",
    "add", "sub", "mul", "div", "scale",
    "matmul", "matvec", "transpose",
    "sigmoid", "tanh", "relu", "exp", "log", "sqrt",
    "softmax_columns", "softmax_rows",
    "l1_normalize_columns", "l1_normalize_rows",
    "sum_all", "sum_rows", "sum_columns",
    "concat", "narrow", "reshape",
]

# === tape node ===

_GRAD_ENABLED = True


class Tensor:
    """A float64 array plus its tape record.

    Fields: ``data`` (the value), ``op`` (producing primitive, ``"leaf"`` for
    inputs), ``parents``/``vjps`` (tape edges), ``grad`` (filled by the most
    recent ``backward`` that visited this node), ``needs_grad`` (whether any
    gradient-enabled leaf feeds this node).
    """

    __slots__ = ("data", "grad", "op", "parents", "vjps", "needs_grad")

    def __init__(self, data, requires_grad: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self.needs_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, needs_grad={self.needs_grad})"

    # Operator sugar for readable cell code. Non-Tensor operands are wrapped
    # as gradient-free constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)


def constant(data) -> Tensor:
    """Wrap an array as a leaf that never receives gradient."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@contextmanager
def no_grad():
    """Suspend tape recording; ops return gradient-free leaves inside."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]) -> Tensor:
    """Build a result tensor; record tape edges only when someone needs them."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.needs_grad for p in parents):
        out.op = op
        out.parents = parents
        out.vjps = vjps
        out.needs_grad = True
    else:
        out.op = "leaf"
        out.parents = ()
        out.vjps = ()
        out.needs_grad = False
    return out


# === backward pass ===

def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every gradient-enabled leaf.

    ``loss`` must hold exactly one element. Returns a map keyed by leaf tensor;
    with ``wrt`` given, the map covers exactly those tensors (zeros for any the
    loss does not depend on). Every visited node also gets its ``grad`` field
    set, which is convenient when inspecting intermediate flows.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward: loss must be scalar-sized, got shape {loss.data.shape}")
    if not loss.needs_grad:
        raise ContractError(
            "backward: loss does not depend on any gradient-enabled tensor")

    # Iterative post-order over the needs-grad subgraph.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()               # keys whose buffer backward may mutate
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.needs_grad:
                continue
            contrib = vjp(g)
            key = id(parent)
            acc = grads.get(key)
            if acc is None:
                # First contribution is kept by reference (it may be a view of
                # g, e.g. from a reshape), so it must not be mutated later.
                grads[key] = contrib
            elif key in owned:
                acc += contrib
            else:
                grads[key] = acc + contrib
                owned.add(key)

    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in topo:
        if node.op == "leaf" and id(node) in grads:
            leaf_grads[node] = grads[id(node)]
    if wrt is not None:
        out = {}
        for t in wrt:
            out[t] = leaf_grads.get(t, np.zeros_like(t.data))
        return out
    return leaf_grads


# === broadcasting helper ===

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{kind}: shapes {sa} and {sb} do not broadcast")


# === elementwise arithmetic ===

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _node(out, "add", (a, b), (
        lambda g, sa=a.data.shape: _unbroadcast(g, sa),
        lambda g, sb=b.data.shape: _unbroadcast(g, sb),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _node(out, "sub", (a, b), (
        lambda g, sa=a.data.shape: _unbroadcast(g, sa),
        lambda g, sb=b.data.shape: _unbroadcast(-g, sb),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return _node(out, "mul", (a, b), (
        lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g * bd, sa),
        lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(g * ad, sb),
    ))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, "div", (a, b), (
        lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g / bd, sa),
        lambda g, od=out, bd=b.data, sb=b.data.shape: _unbroadcast(-g * od / bd, sb),
    ))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(c * a.data, "scale", (a,), (lambda g: c * g,))


# === linear algebra ===

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} are not (n,k)x(k,m)")
    out = a.data @ b.data
    return _node(out, "matmul", (a, b), (
        lambda g, bd=b.data: g @ bd.T,
        lambda g, ad=a.data: ad.T @ g,
    ))


def matvec(a: Tensor, v: Tensor) -> Tensor:
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(
            f"matvec: shapes {a.data.shape} and {v.data.shape} are not (n,k)x(k,)")
    out = a.data @ v.data
    return _node(out, "matvec", (a, v), (
        lambda g, vd=v.data: np.outer(g, vd),
        lambda g, ad=a.data: ad.T @ g,
    ))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.data.shape}")
    return _node(a.data.T.copy(), "transpose", (a,), (lambda g: g.T,))


# === nonlinearities ===

def sigmoid(a: Tensor) -> Tensor:
    # exp(-softplus(-x)) is stable on both tails without branching.
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _node(out, "sigmoid", (a,), (lambda g, y=out: g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), (lambda g, y=out: g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _node(out, "relu", (a,), (lambda g, m=(a.data > 0): g * m,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, "exp", (a,), (lambda g, y=out: g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    out = np.log(a.data)
    return _node(out, "log", (a,), (lambda g, xd=a.data: g / xd,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), (lambda g, y=out: g / (2.0 * y),))


# === normalizers ===

def _softmax(a: Tensor, axis: int, kind: str) -> Tensor:
    x = a.data
    if x.ndim == 1:
        axis = 0
    elif x.ndim != 2:
        raise ShapeError(f"{kind}: expected 1-D or 2-D, got shape {x.shape}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - dot)

    return _node(y, kind, (a,), (vjp,))


def softmax_columns(a: Tensor) -> Tensor:
    """Softmax along each column (a 1-D input is one column)."""
    return _softmax(a, 0, "softmax_columns")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along each row of a 2-D input (or over a 1-D vector)."""
    return _softmax(a, 1, "softmax_rows")


def _l1_normalize(a: Tensor, axis: int, kind: str) -> Tensor:
    x = a.data
    if x.ndim == 1:
        axis = 0
    elif x.ndim != 2:
        raise ShapeError(f"{kind}: expected 1-D or 2-D, got shape {x.shape}")
    n = x.shape[axis]
    s = x.sum(axis=axis, keepdims=True)
    fallback = s == 0.0
    safe = np.where(fallback, 1.0, s)
    y = np.where(fallback, 1.0 / n, x / safe)

    def vjp(g, y=y, safe=safe, fallback=fallback, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        dx = (g - dot) / safe
        return np.where(fallback, 0.0, dx)

    return _node(y, kind, (a,), (vjp,))


def l1_normalize_columns(a: Tensor) -> Tensor:
    """Divide each column by its sum; an all-zero column becomes uniform.

    Intended for non-negative inputs (probability columns); the divisor is the
    plain sum, which equals the L1 norm exactly on that domain.
    """
    return _l1_normalize(a, 0, "l1_normalize_columns")


def l1_normalize_rows(a: Tensor) -> Tensor:
    """Row-wise variant of :func:`l1_normalize_columns` for 2-D inputs."""
    return _l1_normalize(a, 1, "l1_normalize_rows")


# === reductions ===

def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return _node(out, "sum_all", (a,), (
        lambda g, s=a.data.shape: np.broadcast_to(g, s).astype(np.float64, copy=True),
    ))


def _sum_axis(a: Tensor, axis: int, kind: str) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"{kind}: expected 2-D, got shape {a.data.shape}")
    out = a.data.sum(axis=axis)

    def vjp(g, shape=a.data.shape, axis=axis):
        return np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64, copy=True)

    return _node(out, kind, (a,), (vjp,))


def sum_rows(a: Tensor) -> Tensor:
    """Sum of each row: (n, m) -> (n,)."""
    return _sum_axis(a, 1, "sum_rows")


def sum_columns(a: Tensor) -> Tensor:
    """Sum of each column: (n, m) -> (m,)."""
    return _sum_axis(a, 0, "sum_columns")


# === shape plumbing ===

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ContractError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.data.shape for t in ts]} do not stack on axis {axis}")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _node(out, "concat", ts, tuple(make_vjp(i) for i in range(len(ts))))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    n = a.data.shape[axis] if axis < a.data.ndim else -1
    if not (0 <= start and start + length <= n):
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}] out of bounds for axis {axis} "
            f"of shape {a.data.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def vjp(g, shape=a.data.shape, index=index):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return full

    return _node(out, "narrow", (a,), (vjp,))


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.data.shape} as {shape}")
    return _node(out, "reshape", (a,), (
        lambda g, s=a.data.shape: g.reshape(s),
    ))


# === primitive registry ===

# Kind -> callable. The dispatcher exists so tests can enumerate the full
# primitive set mechanically; library code calls the named functions.
PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "matmul": matmul,
    "matvec": matvec,
    "transpose": transpose,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softmax_columns": softmax_columns,
    "softmax_rows": softmax_rows,
    "l1_normalize_columns": l1_normalize_columns,
    "l1_normalize_rows": l1_normalize_rows,
    "sum_all": sum_all,
    "sum_rows": sum_rows,
    "sum_columns": sum_columns,
    "concat": concat,
    "narrow": narrow,
    "reshape": reshape,
}


def primitive_forward(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by kind name (the tape op vocabulary)."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive kind {kind!r}")
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# === finite differences ===

def finite_difference_gradient(f: Callable[[np.ndarray], float],
                               x: np.ndarray,
                               eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    The independent oracle for every VJP in this module: deliberately slow
    and simple, sharing no code with the tape.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
