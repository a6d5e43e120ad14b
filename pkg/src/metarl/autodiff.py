"""Reverse-mode autodiff over flat parameter vectors, with exact Hessian-vector products.

Scope is deliberately small: dense float64 parameter vectors, a dozen primitive
operations (affine maps, tanh, exp/log, sums/means, row gathers for
log-probabilities), and scalar objectives. The computation graph is rebuilt on
every evaluation; nothing persists between calls, so there is no stale-tape
state to manage and graphs can safely cross threads.

Hessian-vector products use forward-over-reverse: every node carries an
optional tangent alongside its value, and the backward pass propagates
adjoint/adjoint-tangent pairs with the product rule. The tangent of the
gradient is exactly H @ v, up to floating point. Finite differences exist only
as test oracles (`fd_grad`, `fd_hvp`) and in the `audit` CLI; they are never a
production gradient path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import instrument
from .errors import NonFiniteValue

__all__ = [
    "ParamVector",
    "Gradient",
    "Segment",
    "Node",
    "Params",
    "value",
    "grad",
    "grad_and_value",
    "hvp",
    "fd_grad",
    "fd_hvp",
    "rel_err",
    "add",
    "sub",
    "mul",
    "matmul",
    "tanh",
    "exp",
    "log",
    "powc",
    "nsum",
    "nmean",
    "gather_rows",
    "row_max_const",
    "reshape",
    "const",
]


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Named contiguous slice of a flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= int(s)
        return n


class ParamVector:
    """Flat float64 parameter vector with a named-segment layout.

    Values are immutable after construction. Two vectors combine (add, scale,
    elementwise multiply) only when their layouts are identical.
    """

    __slots__ = ("values", "segments")

    def __init__(self, values: np.ndarray, segments: Sequence[Segment]):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("parameter values must be a 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("parameter vector contains NaN/Inf")
        segs = tuple(segments)
        offset = 0
        for s in segs:
            if s.offset != offset:
                raise ValueError(f"segment {s.name!r} not contiguous at offset {offset}")
            offset += s.size
        if offset != arr.size:
            raise ValueError(f"segments cover {offset} values, vector has {arr.size}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "segments", segs)

    def __setattr__(self, name, value):  # immutability guard
        raise AttributeError("ParamVector is immutable")

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        for s in self.segments:
            if s.name == name:
                return self.values[s.offset : s.offset + s.size].reshape(s.shape)
        raise KeyError(name)

    def layout_equal(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.segments)

    def _check_combinable(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError("expected a ParamVector")
        if not self.layout_equal(other):
            raise ValueError("parameter vectors have different segment layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_combinable(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_combinable(other)
        return self.with_values(self.values - other.values)

    def scale(self, c: float) -> "ParamVector":
        return self.with_values(self.values * float(c))

    def __mul__(self, c: float) -> "ParamVector":
        return self.scale(c)

    __rmul__ = __mul__

    def hadamard(self, other: "ParamVector") -> "ParamVector":
        """Elementwise product; layouts must match."""
        self._check_combinable(other)
        return self.with_values(self.values * other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __repr__(self) -> str:
        names = ",".join(s.name for s in self.segments)
        return f"ParamVector(size={self.size}, segments=[{names}])"


# A gradient shares the layout of the vector it differentiates.
Gradient = ParamVector


def zeros_like(pv: ParamVector) -> ParamVector:
    return pv.with_values(np.zeros(pv.size))


# ---------------------------------------------------------------------------
# Dual pairs: (value, tangent) with tangent None meaning identically zero
# ---------------------------------------------------------------------------

def _dadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class _D:
    """Internal dual pair. All op forward rules and all adjoint arithmetic are
    written in terms of _D, so tangents propagate through the backward pass by
    construction (yielding exact Hessian-vector products)."""

    __slots__ = ("v", "d")

    def __init__(self, v, d=None):
        self.v = v
        self.d = d

    @staticmethod
    def wrap(x) -> "_D":
        if isinstance(x, _D):
            return x
        return _D(x, None)

    def __add__(self, o):
        o = _D.wrap(o)
        return _D(self.v + o.v, _dadd(self.d, o.d))

    def __sub__(self, o):
        o = _D.wrap(o)
        d = self.d if o.d is None else (_dadd(self.d, -o.d) if self.d is not None else -o.d)
        return _D(self.v - o.v, d)

    def __neg__(self):
        return _D(-self.v, None if self.d is None else -self.d)

    def __mul__(self, o):
        o = _D.wrap(o)
        d = None
        if self.d is not None:
            d = self.d * o.v
        if o.d is not None:
            d = _dadd(d, self.v * o.d)
        return _D(self.v * o.v, d)

    def __truediv__(self, o):
        o = _D.wrap(o)
        inv = 1.0 / o.v
        d = None
        if self.d is not None:
            d = self.d * inv
        if o.d is not None:
            d = _dadd(d, -self.v * o.d * inv * inv)
        return _D(self.v * inv, d)

    def apply_linear(self, f) -> "_D":
        """Apply the same linear array transform to value and tangent."""
        return _D(f(self.v), None if self.d is None else f(self.d))

    def unbroadcast(self, shape: tuple[int, ...]) -> "_D":
        return self.apply_linear(lambda a: _unbroadcast(np.asarray(a), shape))


def _unbroadcast(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the shape it was broadcast from."""
    if arr.shape == shape:
        return arr
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr.reshape(shape)


def _mm(a: _D, b: _D, exact: bool) -> _D:
    """Dual matmul. `exact` routes through einsum, whose per-row results do not
    depend on batch size (needed where single-row and batched evaluations must
    agree bit-for-bit)."""

    def mmv(x, y):
        if exact and getattr(x, "ndim", 0) == 2 and getattr(y, "ndim", 0) == 2:
            return np.einsum("ij,jk->ik", x, y)
        return np.matmul(x, y)

    d = None
    if a.d is not None:
        d = mmv(a.d, b.v)
    if b.d is not None:
        d = _dadd(d, mmv(a.v, b.d))
    return _D(mmv(a.v, b.v), d)


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------

_NODE_IDS = itertools.count()


class Node:
    """One recorded operation result. Graphs are acyclic by construction:
    node ids increase in evaluation order, and the backward pass visits
    reachable nodes in decreasing id order."""

    __slots__ = ("val", "dot", "parents", "vjp", "adj", "idx")

    def __init__(self, val, dot=None, parents=(), vjp=None):
        self.val = val
        self.dot = dot
        self.parents = parents
        self.vjp = vjp
        self.adj: _D | None = None
        self.idx = next(_NODE_IDS)

    @property
    def shape(self):
        return np.shape(self.val)

    def _dual(self) -> _D:
        return _D(self.val, self.dot)

    # Operator sugar; scalars and arrays coerce to constants.
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(const(o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return powc(self, p)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def const(x) -> Node:
    """Constant graph input; carries no gradient and no tangent."""
    return Node(np.asarray(x, dtype=np.float64) if not np.isscalar(x) else np.float64(x))


def _out(pair: _D, parents, vjp) -> Node:
    return Node(pair.v, pair.d, parents, vjp)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape

    def vjp(g: _D, acc):
        acc(a, g.unbroadcast(sa))
        acc(b, g.unbroadcast(sb))

    return _out(a._dual() + b._dual(), (a, b), vjp)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape

    def vjp(g: _D, acc):
        acc(a, g.unbroadcast(sa))
        acc(b, (-g).unbroadcast(sb))

    return _out(a._dual() - b._dual(), (a, b), vjp)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    da, db = a._dual(), b._dual()
    sa, sb = a.shape, b.shape

    def vjp(g: _D, acc):
        acc(a, (g * db).unbroadcast(sa))
        acc(b, (g * da).unbroadcast(sb))

    return _out(da * db, (a, b), vjp)


def matmul(a, b, exact: bool = False) -> Node:
    """Matrix product for the 1-D/2-D combinations np.matmul accepts."""
    a, b = _as_node(a), _as_node(b)
    da, db = a._dual(), b._dual()
    a_vec = np.ndim(a.val) == 1
    b_vec = np.ndim(b.val) == 1
    a2 = da if not a_vec else da.apply_linear(lambda x: x[None, :])
    b2 = db if not b_vec else db.apply_linear(lambda x: x[:, None])
    out2 = _mm(a2, b2, exact)
    out = out2
    if a_vec:
        out = out.apply_linear(lambda x: x[0])
    if b_vec:
        out = out.apply_linear(lambda x: x[..., 0])

    def vjp(g: _D, acc):
        g2 = g
        if a_vec:
            g2 = g2.apply_linear(lambda x: np.reshape(x, (1, -1)))
        elif b_vec:
            g2 = g2.apply_linear(lambda x: np.reshape(x, (-1, 1)))
        ga = _mm(g2, b2.apply_linear(lambda x: x.T), exact)
        gb = _mm(a2.apply_linear(lambda x: x.T), g2, exact)
        if a_vec:
            ga = ga.apply_linear(lambda x: x[0])
        if b_vec:
            gb = gb.apply_linear(lambda x: x[:, 0])
        acc(a, ga)
        acc(b, gb)

    return _out(out, (a, b), vjp)


def tanh(a) -> Node:
    a = _as_node(a)
    da = a._dual()
    yv = np.tanh(da.v)
    yd = None if da.d is None else (1.0 - yv * yv) * da.d
    sech2 = _D(1.0 - yv * yv, None if yd is None else -2.0 * yv * yd)

    def vjp(g: _D, acc):
        acc(a, g * sech2)

    return _out(_D(yv, yd), (a,), vjp)


def exp(a) -> Node:
    a = _as_node(a)
    da = a._dual()
    yv = np.exp(da.v)
    yd = None if da.d is None else yv * da.d
    y = _D(yv, yd)

    def vjp(g: _D, acc):
        acc(a, g * y)

    return _out(y, (a,), vjp)


def log(a) -> Node:
    a = _as_node(a)
    da = a._dual()
    yd = None if da.d is None else da.d / da.v

    def vjp(g: _D, acc):
        acc(a, g / da)

    return _out(_D(np.log(da.v), yd), (a,), vjp)


def powc(a, p) -> Node:
    """a ** p for a constant exponent p."""
    a = _as_node(a)
    p = float(p)
    da = a._dual()
    yv = da.v ** p
    deriv = _D(
        p * da.v ** (p - 1.0),
        None if da.d is None else p * (p - 1.0) * da.v ** (p - 2.0) * da.d,
    )

    def vjp(g: _D, acc):
        acc(a, g * deriv)

    return _out(_D(yv, None if da.d is None else deriv.v * da.d), (a,), vjp)


def nsum(a, axis: int | None = None) -> Node:
    a = _as_node(a)
    shape = a.shape
    out = a._dual().apply_linear(lambda x: np.sum(x, axis=axis))

    def expand(x):
        x = np.asarray(x)
        if axis is None:
            return np.broadcast_to(x, shape)
        return np.broadcast_to(np.expand_dims(x, axis), shape)

    def vjp(g: _D, acc):
        acc(a, g.apply_linear(expand))

    return _out(out, (a,), vjp)


def nmean(a, axis: int | None = None) -> Node:
    a = _as_node(a)
    n = np.prod(a.shape) if axis is None else a.shape[axis]
    return mul(nsum(a, axis=axis), 1.0 / float(n))


def gather_rows(a, idx) -> Node:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    a = _as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(idx.size)
    n_cols = a.shape[1]
    out = a._dual().apply_linear(lambda x: x[rows, idx])

    def scatter(x):
        z = np.zeros((idx.size, n_cols))
        z[rows, idx] = x
        return z

    def vjp(g: _D, acc):
        acc(a, g.apply_linear(scatter))

    return _out(out, (a,), vjp)


def row_max_const(a) -> Node:
    """Row maxima, detached from the graph (constant shift for stable
    log-softmax; value and all derivatives of the composition stay exact)."""
    a = _as_node(a)
    return Node(np.max(a.val, axis=1, keepdims=True))


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    out = a._dual().apply_linear(lambda x: np.reshape(x, shape))

    def vjp(g: _D, acc):
        acc(a, g.apply_linear(lambda x: np.reshape(x, old)))

    return _out(out, (a,), vjp)


def _segment_node(leaf: Node, seg: Segment) -> Node:
    total = np.shape(leaf.val)[0]
    sl = slice(seg.offset, seg.offset + seg.size)
    out = leaf._dual().apply_linear(lambda x: x[sl].reshape(seg.shape))

    def place(x):
        z = np.zeros(total)
        z[sl] = np.reshape(x, -1)
        return z

    def vjp(g: _D, acc):
        acc(leaf, g.apply_linear(place))

    return _out(out, (leaf,), vjp)


# ---------------------------------------------------------------------------
# Objectives over parameter vectors
# ---------------------------------------------------------------------------

Objective = Callable[["Params"], Node]


class Params:
    """Graph-side view of a ParamVector.

    An objective receives one of these; `vec` is the whole flat vector as a
    leaf node, `seg(name)` a named segment. Both views share one leaf, so
    gradients assemble into a single flat vector regardless of access style.
    """

    def __init__(self, pv: ParamVector, tangent: np.ndarray | None = None):
        self.layout = pv.segments
        dot = None if tangent is None else np.array(tangent, dtype=np.float64)
        self._leaf = Node(np.array(pv.values, dtype=np.float64), dot)
        self._seg_nodes: dict[str, Node] = {}

    @property
    def vec(self) -> Node:
        return self._leaf

    def seg(self, name: str) -> Node:
        node = self._seg_nodes.get(name)
        if node is None:
            for s in self.layout:
                if s.name == name:
                    node = _segment_node(self._leaf, s)
                    break
            else:
                raise KeyError(name)
            self._seg_nodes[name] = node
        return node


def _scalar_value(root: Node) -> float:
    if np.size(root.val) != 1:
        raise ValueError("objective must evaluate to a scalar")
    v = float(np.reshape(root.val, ()))
    if not np.isfinite(v):
        raise NonFiniteValue(f"objective evaluated to {v}")
    return v


def _reachable(root: Node) -> list[Node]:
    seen: set[int] = set()
    out: list[Node] = []
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        out.append(n)
        stack.extend(n.parents)
    out.sort(key=lambda n: n.idx, reverse=True)
    return out


def _backward(root: Node, dual: bool) -> None:
    nodes = _reachable(root)
    root.adj = _D(np.float64(1.0), np.float64(0.0) if dual else None)

    def acc(node: Node, contrib: _D) -> None:
        if node.adj is None:
            node.adj = contrib
        else:
            node.adj = _D(node.adj.v + contrib.v, _dadd(node.adj.d, contrib.d))

    for n in nodes:
        if n.adj is None or n.vjp is None:
            continue
        n.vjp(n.adj, acc)


def value(objective: Objective, at: ParamVector) -> float:
    """Evaluate an objective without differentiating it."""
    return _scalar_value(objective(Params(at)))


def grad_and_value(objective: Objective, at: ParamVector) -> tuple[Gradient, float]:
    """Reverse-mode gradient and the objective's value at `at`."""
    instrument.COUNTERS.grad_calls += 1
    p = Params(at)
    root = objective(p)
    val = _scalar_value(root)
    _backward(root, dual=False)
    adj = p._leaf.adj
    g = np.zeros(at.size) if adj is None else np.asarray(adj.v, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteValue("gradient contains NaN/Inf")
    return at.with_values(g), val


def grad(objective: Objective, at: ParamVector) -> Gradient:
    return grad_and_value(objective, at)[0]


def hvp(objective: Objective, at: ParamVector, v: Gradient) -> Gradient:
    """Hessian-vector product H(at) @ v via forward-over-reverse."""
    at._check_combinable(v)
    instrument.COUNTERS.hvp_calls += 1
    p = Params(at, tangent=v.values)
    root = objective(p)
    _scalar_value(root)
    _backward(root, dual=True)
    adj = p._leaf.adj
    if adj is None or adj.d is None:
        hv = np.zeros(at.size)
    else:
        hv = np.asarray(adj.d, dtype=np.float64)
    if not np.all(np.isfinite(hv)):
        raise NonFiniteValue("Hessian-vector product contains NaN/Inf")
    return at.with_values(hv)


# ---------------------------------------------------------------------------
# Finite-difference oracles (tests and `audit` only)
# ---------------------------------------------------------------------------

def fd_grad(objective: Objective, at: ParamVector, epsilon: float = 1e-5) -> Gradient:
    """Central-difference gradient, one coordinate at a time."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    base = at.values
    g = np.zeros(at.size)
    for i in range(at.size):
        hi = base.copy()
        hi[i] += epsilon
        lo = base.copy()
        lo[i] -= epsilon
        g[i] = (value(objective, at.with_values(hi)) - value(objective, at.with_values(lo))) / (
            2.0 * epsilon
        )
    if not np.all(np.isfinite(g)):
        raise NonFiniteValue("finite-difference gradient contains NaN/Inf")
    return at.with_values(g)


def fd_hvp(
    objective: Objective, at: ParamVector, v: Gradient, epsilon: float = 1e-4
) -> Gradient:
    """Central difference of gradients along v: (g(at+eps*v) - g(at-eps*v)) / 2eps."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    hi = grad(objective, at.with_values(at.values + epsilon * v.values))
    lo = grad(objective, at.with_values(at.values - epsilon * v.values))
    return at.with_values((hi.values - lo.values) / (2.0 * epsilon))


def rel_err(a: np.ndarray | ParamVector, b: np.ndarray | ParamVector) -> float:
    """Max absolute difference, scaled by the larger vector's max magnitude."""
    av = a.values if isinstance(a, ParamVector) else np.asarray(a)
    bv = b.values if isinstance(b, ParamVector) else np.asarray(b)
    scale = max(float(np.max(np.abs(av), initial=0.0)), float(np.max(np.abs(bv), initial=0.0)), 1e-12)
    return float(np.max(np.abs(av - bv), initial=0.0)) / scale
