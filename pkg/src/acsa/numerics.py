"""Dense float64 vector math and a small reverse-mode differentiation tape.

Plain functions (``dot``, ``l2norm``, ``cosine``, ``softmax``, ``clamp_plus``)
operate on numpy arrays and return floats/arrays.  The :class:`Tape` records
array-valued nodes so that whole batches of scores can be differentiated with
a few dozen nodes instead of one node per scalar.

Example::

    tape = Tape()
    a = tape.leaf([1.0, 2.0])
    b = tape.leaf([3.0, 4.0])
    out = dot(a, b)
    grads = tape.backward(out)      # grads[a] == [3, 4]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "UsageError",
    "SingularityError",
    "as_vec",
    "dot",
    "l2norm",
    "cosine",
    "softmax",
    "clamp_plus",
    "Tape",
    "Var",
    "normalize",
    "einsum",
    "relu",
    "sqrt",
    "exp",
    "log",
    "masked_softmax",
    "log_softmax",
    "kl_terms",
    "reduce_sum",
    "reduce_mean",
    "where_rows",
]


class UsageError(ValueError):
    """Caller violated an operation precondition."""


class SingularityError(ArithmeticError):
    """A gradient was requested at a point where it does not exist."""


def as_vec(x) -> np.ndarray:
    """Coerce ``x`` to a finite, 1-d float64 array (the ``Vec64`` contract)."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise UsageError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise UsageError("vector has non-finite entries")
    return v


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Node:
    kind: str
    parents: tuple[int, ...]
    # maps the output adjoint to one adjoint per parent
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __hash__(self):
        return id(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Append-only record of operations.

    Parents always precede their children, so a single reverse sweep over the
    node list is a valid topological order.  One tape per evaluation; a tape
    is not safe to share between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self.leaves: list[Var] = []
        self.degenerate = 0
        self.last_visits = 0

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        arr = np.array(value, dtype=np.float64)
        v = self._push("leaf", (), None, arr)
        self.leaves.append(v)
        return v

    def const(self, value) -> Var:
        return self._push("const", (), None, np.asarray(value, dtype=np.float64))

    def _push(self, kind, parents, vjp, value) -> Var:
        for p in parents:
            if p >= len(self.nodes):
                raise UsageError("parent index must precede the node")
        self.nodes.append(_Node(kind, tuple(parents), vjp))
        self._values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, output: Var) -> dict[Var, np.ndarray]:
        """Gradient of the scalar ``output`` with respect to every leaf."""
        if not isinstance(output, Var) or output.tape is not self:
            raise UsageError("output is not recorded on this tape")
        if output.value.size != 1:
            raise UsageError("backward needs a scalar output")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[output.index] = np.ones_like(output.value)
        visits = 0
        for idx in range(output.index, -1, -1):
            visits += 1
            g = adj[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        self.last_visits = visits
        return {
            leaf: (adj[leaf.index] if adj[leaf.index] is not None else np.zeros_like(leaf.value))
            for leaf in self.leaves
        }


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise UsageError("operands live on different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Differentiable primitives.  Each accepts Vars or arrays; with no Var
# operand they simply compute the forward value.
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    out = _val(a) + _val(b)
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._push("add", (a.index, b.index), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), out)


def neg(a):
    tape = _tape_of(a)
    if tape is None:
        return -_val(a)
    return tape._push("neg", (a.index,), lambda g: (-g,), -a.value)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av * bv
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(
        "mul",
        (a.index, b.index),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        out,
    )


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av / bv
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(
        "div",
        (a.index, b.index),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        out,
    )


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av @ bv
    if tape is None:
        return out
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise UsageError("matmul on the tape supports (n,m)@(m,) and (n,m)@(m,p)")
    a, b = _lift(tape, a), _lift(tape, b)

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return tape._push("matmul", (a.index, b.index), vjp, out)


def transpose(a):
    tape = _tape_of(a)
    if tape is None:
        return _val(a).T
    return tape._push("transpose", (a.index,), lambda g: (g.T,), a.value.T)


def getitem(a, key):
    tape = _tape_of(a)
    out = _val(a)[key]
    if tape is None:
        return out
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return tape._push("getitem", (a.index,), vjp, np.array(out, dtype=np.float64))


def stack(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    out = np.stack([_val(x) for x in xs], axis=axis)
    if tape is None:
        return out
    xs = [_lift(tape, x) for x in xs]
    n = len(xs)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return tape._push("stack", tuple(x.index for x in xs), vjp, out)


def concat(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    out = np.concatenate([_val(x) for x in xs], axis=axis)
    if tape is None:
        return out
    xs = [_lift(tape, x) for x in xs]
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return tape._push("concat", tuple(x.index for x in xs), vjp, out)


def reshape(a, shape):
    tape = _tape_of(a)
    if tape is None:
        return _val(a).reshape(shape)
    old = a.shape
    return tape._push("reshape", (a.index,), lambda g: (g.reshape(old),), a.value.reshape(shape))


def reduce_sum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    out = np.sum(_val(a), axis=axis, keepdims=keepdims)
    if tape is None:
        return out
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return tape._push("sum", (a.index,), vjp, np.asarray(out, dtype=np.float64))


def reduce_mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a):
    tape = _tape_of(a)
    out = np.exp(_val(a))
    if tape is None:
        return out
    return tape._push("exp", (a.index,), lambda g: (g * out,), out)


def log(a):
    tape = _tape_of(a)
    av = _val(a)
    out = np.log(av)
    if tape is None:
        return out
    return tape._push("log", (a.index,), lambda g: (g / av,), out)


def sqrt(a):
    tape = _tape_of(a)
    av = _val(a)
    out = np.sqrt(av)
    if tape is None:
        return out

    def vjp(g):
        if np.any(out == 0.0):
            raise SingularityError("sqrt gradient at 0")
        return (g * 0.5 / out,)

    return tape._push("sqrt", (a.index,), vjp, out)


def relu(a):
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is 0."""
    tape = _tape_of(a)
    av = _val(a)
    out = np.maximum(av, 0.0)
    if tape is None:
        return out
    active = av > 0.0
    return tape._push("relu", (a.index,), lambda g: (g * active,), out)


def einsum(spec: str, a, b):
    """Two-operand einsum without repeated or operand-private summed indices."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = np.einsum(spec, av, bv)
    if tape is None:
        return out
    ins, o = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in o and c not in other for c in s):
            raise UsageError(f"unsupported einsum for differentiation: {spec}")
    a, b = _lift(tape, a), _lift(tape, b)

    def vjp(g):
        return (np.einsum(f"{o},{sb}->{sa}", g, bv), np.einsum(f"{o},{sa}->{sb}", g, av))

    return tape._push("einsum", (a.index, b.index), vjp, out)


def normalize(a, axis: int = -1):
    """``x / ||x||`` along ``axis``.  Zero vectors map to zero with zero
    gradient and are counted in ``tape.degenerate``."""
    tape = _tape_of(a)
    av = _val(a)
    n = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))
    zero = n == 0.0
    safe = np.where(zero, 1.0, n)
    out = np.where(zero, 0.0, av / safe)
    if tape is None:
        return out
    tape.degenerate += int(zero.sum())

    def vjp(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - out * proj) / safe),)

    return tape._push("normalize", (a.index,), vjp, out)


def masked_softmax(a, axis: int = -1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    tape = _tape_of(a)
    av = _val(a)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
        av = np.where(mask, av, -np.inf)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(av - m)
    z = e.sum(axis=axis, keepdims=True)
    out = e / np.where(z == 0.0, 1.0, z)
    if tape is None:
        return out

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return tape._push("softmax", (a.index,), vjp, out)


def log_softmax(a, axis: int = -1):
    tape = _tape_of(a)
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))
    out = av - lse
    if tape is None:
        return out
    p = np.exp(out)

    def vjp(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return tape._push("log_softmax", (a.index,), vjp, out)


def kl_terms(p, log_q):
    """Elementwise ``p * (log p - log_q)`` with ``0 log 0 = 0``.

    ``log_q`` is treated as a constant.  Where ``p == 0`` the gradient is
    taken as 0.
    """
    tape = _tape_of(p)
    pv = _val(p)
    lq = np.asarray(log_q, dtype=np.float64)
    pos = pv > 0.0
    lp = np.log(np.where(pos, pv, 1.0))
    out = np.where(pos, pv * (lp - lq), 0.0)
    if tape is None:
        return out
    return tape._push("kl", (p.index,), lambda g: (np.where(pos, g * (lp - lq + 1.0), 0.0),), out)


def where_rows(cond, a, b):
    """``np.where(cond, a, b)`` with a constant boolean ``cond``."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = np.where(cond, av, bv)
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    c = np.broadcast_to(cond, out.shape)
    return tape._push(
        "where",
        (a.index, b.index),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), av.shape), _unbroadcast(np.where(c, 0.0, g), bv.shape)),
        out,
    )


# ---------------------------------------------------------------------------
# Vector-level operations
# ---------------------------------------------------------------------------


def _check_pair(a, b):
    if _val(a).shape != _val(b).shape:
        raise UsageError(f"dimension mismatch: {_val(a).shape} vs {_val(b).shape}")


def dot(a, b):
    """Inner product of two equal-length vectors."""
    _check_pair(a, b)
    if _tape_of(a, b) is None:
        return float(np.dot(_val(a), _val(b)))
    return reduce_sum(mul(a, b))


def l2norm(a):
    """Euclidean norm.  Forward is 0 on the zero vector; its gradient raises."""
    if _val(a).size == 0:
        raise UsageError("l2norm of an empty vector")
    tape = _tape_of(a)
    av = _val(a)
    n = float(np.sqrt(np.dot(av, av)))
    if tape is None:
        return n

    def vjp(g):
        if n == 0.0:
            raise SingularityError("l2norm gradient at the zero vector")
        return (g * av / n,)

    return tape._push("l2norm", (a.index,), vjp, np.asarray(n))


def cosine(a, b, *, with_flag: bool = False):
    """Cosine similarity; 0 when either vector is zero.

    With ``with_flag=True`` returns ``(value, degenerate)``.
    """
    _check_pair(a, b)
    av, bv = _val(a), _val(b)
    degenerate = not (np.any(av) and np.any(bv))
    if _tape_of(a, b) is None:
        if degenerate:
            val = 0.0
        else:
            val = float(np.dot(av, bv) / (math.sqrt(np.dot(av, av)) * math.sqrt(np.dot(bv, bv))))
            val = min(1.0, max(-1.0, val))
        return (val, degenerate) if with_flag else val
    out = reduce_sum(mul(normalize(a), normalize(b)))
    return (out, degenerate) if with_flag else out


def softmax(x, lam: float = 1.0):
    """Softmax of ``lam * x`` with max subtraction."""
    if lam <= 0:
        raise UsageError("inverse temperature must be positive")
    if _val(x).size == 0:
        raise UsageError("softmax of an empty sequence")
    return masked_softmax(mul(x, lam) if isinstance(x, Var) else lam * _val(x))


def clamp_plus(x):
    """``max(x, 0)`` with subgradient 0 at 0."""
    if isinstance(x, Var):
        return relu(x)
    return float(max(x, 0.0)) if np.ndim(x) == 0 else relu(x)
