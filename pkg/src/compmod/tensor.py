"""Dense float64 matrices with a small reverse-mode autodiff engine.

Every value is a 2-D ``numpy`` array.  A :class:`Node` wraps one array, its
parents and a closure that maps the upstream gradient to one gradient per
parent.  Broadcasting is limited to row vectors (1 x d) and column vectors
(n x 1) against full matrices.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count()


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {a.shape}")
    return a


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("id", "value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward=None, requires_grad=False):
        self.id = next(_ids)
        self.value = as_matrix(value)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(value) -> Node:
    return Node(value, requires_grad=True)


def const(value) -> Node:
    return Node(value)


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def detach(x: Node) -> Node:
    return Node(x.value)


def _make(value, parents, op, backward) -> Node:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, parents, op, backward, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise with restricted broadcasting


def _broadcast_shape(sa, sb, opname):
    out = []
    for x, y in zip(sa, sb):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"{opname}: cannot broadcast shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    if isinstance(b, (int, float)):
        return scale(lift(a), b)
    if isinstance(a, (int, float)):
        return scale(lift(b), a)
    a, b = lift(a), lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    if isinstance(b, (int, float)):
        return scale(lift(a), 1.0 / b)
    a, b = lift(a), lift(b)
    _broadcast_shape(a.shape, b.shape, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), "scale", lambda g: (g * c,))


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), "square", lambda g: (2.0 * g * av,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Node) -> Node:
    av = a.value
    return _make(np.log(av), (a,), "log", lambda g: (g / av,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def minimum(a: Node, b: Node) -> Node:
    """Elementwise minimum of equal-shape nodes; ties route the gradient to ``a``."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.value <= b.value
    return _make(np.where(pick_a, a.value, b.value), (a, b), "minimum",
                 lambda g: (g * pick_a, g * ~pick_a))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), "transpose", lambda g: (g.T,))


def total(a: Node) -> Node:
    shape = a.shape
    return _make(a.value.sum().reshape(1, 1), (a,), "sum",
                 lambda g: (np.full(shape, g[0, 0]),))


def sum_rows(a: Node) -> Node:
    """Sum over rows, giving a 1 x d row vector."""
    shape = a.shape
    return _make(a.value.sum(axis=0, keepdims=True), (a,), "sum_rows",
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_cols(a: Node) -> Node:
    """Sum over columns, giving an n x 1 column vector."""
    shape = a.shape
    return _make(a.value.sum(axis=1, keepdims=True), (a,), "sum_cols",
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Node) -> Node:
    return scale(total(a), 1.0 / a.value.size)


def mean_rows(a: Node) -> Node:
    return scale(sum_rows(a), 1.0 / a.shape[0])


def trace(a: Node) -> Node:
    n, m = a.shape
    if n != m:
        raise DimensionError(f"trace: matrix must be square, got {a.shape}")

    def back(g):
        return (np.eye(n) * g[0, 0],)

    return _make(np.trace(a.value).reshape(1, 1), (a,), "trace", back)


def diag_part(a: Node) -> Node:
    """Diagonal of a square matrix as a 1 x n row vector."""
    n, m = a.shape
    if n != m:
        raise DimensionError(f"diag_part: matrix must be square, got {a.shape}")

    def back(g):
        return (np.diag(g[0]),)

    return _make(np.diag(a.value).reshape(1, n).copy(), (a,), "diag", back)


def concat_cols(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _make(np.hstack([a.value, b.value]), (a, b), "concat_cols",
                 lambda g: (g[:, :k], g[:, k:]))


def concat_rows(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    k = a.shape[0]
    return _make(np.vstack([a.value, b.value]), (a, b), "concat_rows",
                 lambda g: (g[:k], g[k:]))


def gather(a: Node, rows: np.ndarray, cols: np.ndarray) -> Node:
    """Pick ``a[rows[i], cols[i]]`` into a column vector."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _make(a.value[rows, cols].reshape(-1, 1), (a,), "gather", back)


def logsumexp_rows(a: Node, mask: np.ndarray | None = None) -> Node:
    """Row-wise log-sum-exp over the entries where ``mask`` is true."""
    av = a.value
    if mask is None:
        mask = np.ones(av.shape, dtype=bool)
    masked = np.where(mask, av, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    w = np.where(mask, np.exp(masked - top), 0.0)
    s = w.sum(axis=1, keepdims=True)
    out = top + np.log(s)
    soft = w / s
    return _make(out, (a,), "logsumexp", lambda g: (g * soft,))


def row_normalize(z: Node, eps: float = 1e-12) -> Node:
    """Divide every row by ``max(||row||_2, eps)``."""
    if not eps > 0:
        raise ContractError(f"row_normalize: eps must be positive, got {eps}")
    zv = z.value
    norms = np.sqrt((zv * zv).sum(axis=1, keepdims=True))
    active = norms >= eps
    denom = np.where(active, norms, eps)
    out = zv / denom

    def back(g):
        radial = (g * out).sum(axis=1, keepdims=True)
        return (np.where(active, (g - out * radial) / denom, g / eps),)

    return _make(out, (z,), "row_normalize", back)


def power_series_trace(a: Node, m: int, lam: float) -> Node:
    """Trace of the order-``m`` truncation of ``log(I + lam * a)``.

    Powers are accumulated by repeated multiplication, so the result is
    differentiable and matches the truncated series term by term even where
    the series itself would not converge.
    """
    a = lift(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"power_series_trace: matrix must be square, got {a.shape}")
    if m < 1:
        raise ContractError(f"power_series_trace: order must be >= 1, got {m}")
    if not lam > 0:
        raise ContractError(f"power_series_trace: lambda must be positive, got {lam}")
    p = scale(a, lam)
    term = p
    acc = trace(p)
    for k in range(2, m + 1):
        term = matmul(term, p)
        acc = add(acc, scale(trace(term), (-1.0) ** (k + 1) / k))
    return acc


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) into ``.grad`` of every leaf that requires it.

    Returns ``{leaf.id: grad}``.  Leaf gradients add onto whatever was there
    before; call :meth:`Node.zero_grad` between steps.
    """
    if root.value.shape != (1, 1):
        raise ContractError(f"backward: root must be a 1x1 scalar, got {root.value.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    upstream: dict[int, np.ndarray] = {root.id: np.ones((1, 1))}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = upstream.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node.id] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = upstream.get(parent.id)
            upstream[parent.id] = pg if prev is None else prev + pg
    return leaves


def grad(root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to ``wrt`` (zeros where unreachable)."""
    for w in wrt:
        w.zero_grad()
    backward(root)
    return [np.zeros(w.shape) if w.grad is None else w.grad for w in wrt]


# ---------------------------------------------------------------------------
# finite-difference validation


def grad_check(f: Callable[[Node], Node], x0, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x0``.

    The per-coordinate error is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"grad_check: eps must lie in [1e-7, 1e-4], got {eps}")
    x0 = as_matrix(x0).copy()
    leaf = param(x0)
    out = f(leaf)
    if out.value.shape != (1, 1):
        raise ContractError(f"grad_check: f must return a scalar, got {out.value.shape}")
    backward(out)
    g_ad = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    g_fd = np.zeros_like(x0)
    for idx in itertools.product(range(x0.shape[0]), range(x0.shape[1])):
        probe = x0.copy()
        probe[idx] += eps
        fp = f(const(probe)).item()
        probe[idx] -= 2 * eps
        fm = f(const(probe)).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"grad_check: f is not finite when perturbing coordinate {idx}")
        g_fd[idx] = (fp - fm) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))

