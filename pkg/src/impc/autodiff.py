"""A small reverse-mode automatic differentiation tape.

Values are Python floats or float64 numpy arrays. Every operation on a
:class:`Var` appends one node to the owning :class:`Tape`; the node keeps the
parent indices and a vector-Jacobian product closure (for elementwise ops the
closure just multiplies by the stored local partials). ``backward`` walks the
nodes in strict reverse construction order.

The module-level functions (``sin``, ``stack``, ``solve`` ...) accept plain
floats and arrays as well, and fall through to ``math``/``numpy`` when no Var
is involved. Model code is written once against these functions and runs
either tape-free or on a tape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .linalg import solve_linear


class TapeError(RuntimeError):
    pass


class Tape:
    """Append-only record of operations.

    A tape is single-owner and must not be shared between threads.
    """

    def __init__(self):
        self._kinds: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []

    def __len__(self):
        return len(self._kinds)

    def var(self, value) -> "Var":
        """Register a leaf (an input we want gradients for)."""
        return self._push("leaf", _as_value(value), (), None)

    def _push(self, kind, value, parents, vjp) -> "Var":
        self._kinds.append(kind)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(value, self, len(self._kinds) - 1)

    def record(self, kind: str, inputs: Sequence["Var"], value, partials: Sequence) -> "Var":
        """Record an elementwise op given its local partial derivatives.

        ``partials[i]`` is d(output)/d(inputs[i]) evaluated at the forward
        values; it must broadcast against the output.
        """
        if len(inputs) != len(partials):
            raise ValueError("need one partial per input")
        tape = _common_tape(inputs)
        if tape is not self:
            raise TapeError("inputs belong to a different tape")
        idx, shapes, parts = [], [], []
        for x, d in zip(inputs, partials):
            if isinstance(x, Var) and x.tape is not None:
                idx.append(x.index)
                shapes.append(np.shape(x.value))
                parts.append(d)

        def vjp(g):
            return tuple(_unbroadcast(g * d, s) for d, s in zip(parts, shapes))

        return self._push(kind, _as_value(value), tuple(idx), vjp)

    def backward(self, seed: "Var", grad=None) -> "Gradients":
        """Accumulate adjoints of every node with respect to ``seed``.

        ``grad`` is the cotangent of ``seed``; it defaults to ones, which for a
        scalar seed gives the plain gradient.
        """
        if not isinstance(seed, Var) or seed.tape is not self:
            raise TapeError("seed was not produced on this tape")
        adj: list = [None] * (seed.index + 1)
        adj[seed.index] = _ones_like(seed.value) if grad is None else _as_value(grad)
        for i in range(seed.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            for p, gp in zip(self._parents[i], vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return Gradients(self, adj)


class Gradients:
    """Adjoints from one backward pass, indexed by node id."""

    def __init__(self, tape: Tape, adjoints: list):
        self.tape = tape
        self._adj = adjoints

    def __getitem__(self, node_id: int):
        if node_id < len(self._adj) and self._adj[node_id] is not None:
            return self._adj[node_id]
        return 0.0

    def wrt(self, x: "Var"):
        """Adjoint for ``x``; zeros for constants and unreached nodes."""
        if not isinstance(x, Var) or x.tape is None:
            return np.zeros_like(x.value if isinstance(x, Var) else x, dtype=float)
        if x.tape is not self.tape:
            raise TapeError("variable belongs to another tape")
        g = self[x.index]
        if isinstance(g, float) and np.ndim(x.value):
            return np.zeros(np.shape(x.value))
        return g

    def as_dict(self) -> dict[int, object]:
        return {i: g for i, g in enumerate(self._adj) if g is not None}


class Var:
    """A value tracked on a tape; ``tape is None`` marks a constant."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape: Tape | None = None, index: int | None = None):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Var({self.value!r}, node={self.index})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __iter__(self):
        return (self[i] for i in range(len(self.value)))

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

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------- helpers


def _as_value(v):
    if isinstance(v, Var):
        return v.value
    if isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool):
        return float(v)
    return np.asarray(v, dtype=float)


def _ones_like(v):
    return 1.0 if isinstance(v, float) else np.ones_like(v)


def _is_tracked(x) -> bool:
    return isinstance(x, Var) and x.tape is not None


def _common_tape(xs: Iterable) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operation mixes Vars from different tapes")
    return tape


def _unbroadcast(g, shape):
    if np.shape(g) == shape:
        return g
    if shape == ():
        return float(np.sum(g))
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_shapes(a, b, op):
    # equal shapes, a scalar, or a 1-D row broadcast over the last axis
    # (bias add); anything else numpy would silently broadcast is an error
    sa, sb = np.shape(a), np.shape(b)
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 1 and len(sb) == 2 and sa[0] == sb[1]:
        return
    if len(sb) == 1 and len(sa) == 2 and sb[0] == sa[1]:
        return
    raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


def value(x):
    """Strip tape tracking (the forward value, detached)."""
    return x.value if isinstance(x, Var) else x


def detach(x):
    return value(x)


def _binary(kind, a, b, f, da, db):
    """Shared path for elementwise binary ops. ``da``/``db`` build partials
    lazily from the forward values so tape-free calls pay nothing."""
    av, bv = value(a), value(b)
    _check_shapes(av, bv, kind)
    out = f(av, bv)
    tape = _common_tape((a, b))
    if tape is None:
        return out
    ins, parts = [], []
    if _is_tracked(a):
        ins.append(a)
        parts.append(da(av, bv, out))
    if _is_tracked(b):
        ins.append(b)
        parts.append(db(av, bv, out))
    return tape.record(kind, ins, out, parts)


def _unary(kind, x, f, dfdx):
    xv = value(x)
    out = f(xv)
    if not _is_tracked(x):
        return out
    return x.tape.record(kind, (x,), out, (dfdx(xv, out),))


def _elementwise(mf, nf):
    def f(v):
        return mf(v) if isinstance(v, float) else nf(v)
    return f


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda x, y, o: 1.0, lambda x, y, o: 1.0)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda x, y, o: 1.0, lambda x, y, o: -1.0)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda x, y, o: y, lambda x, y, o: x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda x, y, o: 1.0 / y, lambda x, y, o: -o / y)


def neg(a):
    return _unary("neg", a, lambda v: -v, lambda v, o: -1.0)


def power(a, k: float):
    if isinstance(k, Var):
        raise TypeError("only constant exponents are supported")
    k = float(k)
    return _unary("pow", a, lambda v: v ** k, lambda v, o: k * v ** (k - 1.0))


_sin = _elementwise(math.sin, np.sin)
_cos = _elementwise(math.cos, np.cos)
_tan = _elementwise(math.tan, np.tan)
_exp = _elementwise(math.exp, np.exp)
_log = _elementwise(math.log, np.log)
_sqrt = _elementwise(math.sqrt, np.sqrt)
_tanh = _elementwise(math.tanh, np.tanh)
_asin = _elementwise(math.asin, np.arcsin)


def sin(x):
    return _unary("sin", x, _sin, lambda v, o: _cos(v))


def cos(x):
    return _unary("cos", x, _cos, lambda v, o: -_sin(v))


def tan(x):
    return _unary("tan", x, _tan, lambda v, o: 1.0 + o * o)


def exp(x):
    return _unary("exp", x, _exp, lambda v, o: o)


def log(x):
    return _unary("log", x, _log, lambda v, o: 1.0 / v)


def sqrt(x):
    return _unary("sqrt", x, _sqrt, lambda v, o: 0.5 / o)


def tanh(x):
    return _unary("tanh", x, _tanh, lambda v, o: 1.0 - o * o)


def asin(x):
    return _unary("asin", x, _asin, lambda v, o: 1.0 / _sqrt(1.0 - v * v))


def atan2(y, x):
    def f(a, b):
        return math.atan2(a, b) if isinstance(a, float) and isinstance(b, float) else np.arctan2(a, b)

    def dy(a, b, o):
        return b / (a * a + b * b)

    def dx(a, b, o):
        return -a / (a * a + b * b)

    return _binary("atan2", y, x, f, dy, dx)


def _sinc_sq_val(s):
    # sin(sqrt(s))/sqrt(s) and its derivative in s, series near zero
    if s < 1e-6:
        return 1.0 - s / 6.0 + s * s / 120.0, -1.0 / 6.0 + s / 60.0
    r = math.sqrt(s)
    f = math.sin(r) / r
    return f, (math.cos(r) - f) / (2.0 * s)


def _versine_sq_val(s):
    # (1 - cos(sqrt(s)))/s and its derivative in s
    if s < 1e-6:
        return 0.5 - s / 24.0 + s * s / 720.0, -1.0 / 24.0 + s / 360.0
    r = math.sqrt(s)
    f = (1.0 - math.cos(r)) / s
    return f, (math.sin(r) / r - 2.0 * f) / (2.0 * s)


def sinc_sq(s):
    """sin(sqrt(s))/sqrt(s), smooth at s = 0 (scalar)."""
    sv = float(value(s))
    f, d = _sinc_sq_val(sv)
    if not _is_tracked(s):
        return f
    return s.tape.record("sinc_sq", (s,), f, (d,))


def versine_sq(s):
    """(1 - cos(sqrt(s)))/s, smooth at s = 0 (scalar)."""
    sv = float(value(s))
    f, d = _versine_sq_val(sv)
    if not _is_tracked(s):
        return f
    return s.tape.record("versine_sq", (s,), f, (d,))


# ---------------------------------------------------------------- array ops


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    if isinstance(out, np.floating):
        out = float(out)
    tape = _common_tape((a, b))
    if tape is None:
        return out
    ta, tb = _is_tracked(a), _is_tracked(b)
    parents = tuple(x.index for x in (a, b) if _is_tracked(x))

    def vjp(g):
        res = []
        if ta:
            if np.ndim(bv) == 1:
                res.append(np.multiply.outer(g, bv) if np.ndim(av) == 2 else g * bv)
            else:
                res.append(g @ bv.T if np.ndim(av) == 2 else bv @ g)
        if tb:
            if np.ndim(av) == 1:
                res.append(np.multiply.outer(av, g) if np.ndim(bv) == 2 else g * av)
            else:
                res.append(av.T @ g)
        return tuple(res)

    return tape._push("matmul", out, parents, vjp)


def transpose(a):
    if not _is_tracked(a):
        return np.transpose(value(a))
    return a.tape._push("transpose", np.transpose(a.value), (a.index,), lambda g: (np.transpose(g),))


def getitem(a, key):
    av = value(a)
    out = av[key]
    if isinstance(out, np.floating):
        out = float(out)
    if not _is_tracked(a):
        return out
    shape = av.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)

    return a.tape._push("getitem", out, (a.index,), vjp)


def reshape(a, shape):
    av = value(a)
    out = np.reshape(av, shape)
    if not _is_tracked(a):
        return out
    s0 = np.shape(av)
    return a.tape._push("reshape", out, (a.index,), lambda g: (np.reshape(g, s0),))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    av = value(a)
    out = np.sum(av, axis=axis)
    if np.ndim(out) == 0:
        out = float(out)
    if not _is_tracked(a):
        return out
    shape = np.shape(av)

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape._push("sum", out, (a.index,), vjp)


def dot(a, b):
    return sum(mul(a, b))


def norm(a):
    return sqrt(dot(a, a))


def stack(items: Sequence, axis: int = 0):
    """Stack scalars or equal-shape arrays (Vars or constants) into a new axis."""
    vals = [value(x) for x in items]
    out = np.stack([np.asarray(v, dtype=float) for v in vals], axis=axis)
    tape = _common_tape(items)
    if tape is None:
        return out
    tracked = [(i, x.index) for i, x in enumerate(items) if _is_tracked(x)]

    def vjp(g):
        return tuple(
            _scalar_or_array(np.take(g, i, axis=axis)) for i, _ in tracked)

    return tape._push("stack", out, tuple(p for _, p in tracked), vjp)


def array(nested):
    """Build an array from a (possibly nested) list of scalars/Vars."""
    if not isinstance(nested, (list, tuple)):
        return nested
    if not _contains_var(nested):
        return np.array(nested, dtype=float)
    rows = [array(r) for r in nested]
    return stack(rows)


def _contains_var(nested) -> bool:
    for r in nested:
        if isinstance(r, (list, tuple)):
            if _contains_var(r):
                return True
        elif _is_tracked(r):
            return True
    return False


def concatenate(items: Sequence, axis: int = 0):
    vals = [np.asarray(value(x), dtype=float) for x in items]
    out = np.concatenate(vals, axis=axis)
    tape = _common_tape(items)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    tracked = [(i, x.index) for i, x in enumerate(items) if _is_tracked(x)]

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i, _ in tracked)

    return tape._push("concat", out, tuple(p for _, p in tracked), vjp)


def _scalar_or_array(g):
    return float(g) if np.ndim(g) == 0 else g


def solve(a, b):
    """Differentiable ``a^{-1} b`` through :func:`solve_linear`."""
    av, bv = value(a), value(b)
    x = solve_linear(av, bv)
    tape = _common_tape((a, b))
    if tape is None:
        return x
    ta, tb = _is_tracked(a), _is_tracked(b)
    parents = tuple(v.index for v in (a, b) if _is_tracked(v))

    def vjp(g):
        gb = solve_linear(av.T, g)
        res = []
        if ta:
            res.append(-(np.multiply.outer(gb, x) if x.ndim == 1 else gb @ x.T))
        if tb:
            res.append(gb)
        return tuple(res)

    return tape._push("solve", x, parents, vjp)


def where_mask(mask, a):
    """Elementwise ``a * mask`` for a constant 0/1 mask."""
    return mul(a, np.asarray(mask, dtype=float))


def backward(tape: Tape, seed: Var, grad=None) -> Gradients:
    return tape.backward(seed, grad)
