"""Reverse-mode automatic differentiation on an explicit tape.

Values are plain ``float64`` numpy arrays.  A :class:`Node` wraps a value that
was produced while a :class:`Tape` was recording; every op accepts either
arrays or nodes and returns an array when none of its inputs is a node, so the
same model code runs both as pure inference and under differentiation.

When a tape is created with ``higher_order=True``, :meth:`Tape.backward`
builds the gradient out of ordinary recorded ops.  The returned gradients are
nodes themselves and can be differentiated again, which is what makes it
possible to backpropagate through an unrolled SGD inner loop.

Broadcasting follows numpy rules; the vector-Jacobian products reduce over the
broadcast axes.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError", "DomainError", "NonFiniteError",
    "Node", "Tape", "active_tape", "value_of", "is_node", "shape_of",
    "add", "sub", "mul", "div", "neg", "matmul", "broadcast_to", "sum_to",
    "sum", "mean", "exp", "log", "sqrt", "tanh", "sigmoid", "relu",
    "softplus", "square", "concat", "getitem", "reshape", "swapaxes",
    "gaussian_log_density", "gaussian_kl_to_standard",
    "finite_difference_grad", "relative_error", "grad",
]

_builtin_sum = sum


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class DomainError(ValueError):
    """Raised when an op is applied outside its mathematical domain."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or infinity."""


class Node:
    __slots__ = ("id", "op", "parents", "value", "grad", "tape", "_vjp", "__weakref__")

    # numpy must defer to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, op, value, parents=(), vjp=None):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = parents
        self.grad = None
        self._vjp = vjp
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def parent_ids(self):
        return [p.id for p in self.parents if isinstance(p, Node)]

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


_tape_stack: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Topologically ordered record of every node created while it is active.

    Use as a context manager::

        with Tape(higher_order=True) as tape:
            x = tape.variable(np.array([2.0]))
            y = sum(x * x * x)
            (dy,) = tape.backward(y, [x])      # a Node
            (d2y,) = tape.backward(sum(dy), [x])
    """

    def __init__(self, higher_order: bool = False):
        self.nodes: list[Node] = []
        self.higher_order = higher_order

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> Node:
        """Register a leaf holding a copy of ``value``."""
        arr = np.array(value, dtype=np.float64)
        _check_finite("variable", arr)
        return Node(self, "leaf", arr)

    def backward(self, root, wrt: Sequence, create_graph: bool | None = None) -> list:
        """Gradients of the scalar ``root`` with respect to each node in ``wrt``.

        ``create_graph`` defaults to the tape's ``higher_order`` flag.  In that
        mode the result entries are nodes (or constant arrays when the gradient
        does not depend on anything recorded).  Otherwise they are arrays and
        are also stored in each ``wrt`` node's ``grad`` slot.
        """
        if create_graph is None:
            create_graph = self.higher_order
        if create_graph and not self.higher_order:
            raise ValueError("create_graph requires a higher-order tape")
        if not isinstance(root, Node):
            return [np.zeros(shape_of(w)) for w in wrt]
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
        for w in wrt:
            if not isinstance(w, Node) or w.tape is not self:
                raise ValueError("backward: every wrt entry must be a node on this tape")

        wrt_ids = {w.id for w in wrt}
        lo = min(wrt_ids) if wrt_ids else root.id + 1

        # ancestors of root that can possibly depend on a wrt node
        seen = {root.id: root}
        stack = [root]
        while stack:
            n = stack.pop()
            for p in n.parents:
                if isinstance(p, Node) and p.id >= lo and p.id not in seen:
                    seen[p.id] = p
                    stack.append(p)
        ordered = [seen[i] for i in sorted(seen)]
        live = set()
        for n in ordered:
            if n.id in wrt_ids or any(isinstance(p, Node) and p.id in live for p in n.parents):
                live.add(n.id)

        grads = {}
        if root.id in live:
            grads[root.id] = np.ones_like(root.value)
        results = {}
        for n in reversed(ordered):
            g = grads.pop(n.id, None)
            if g is None:
                continue
            if n.id in wrt_ids:
                results[n.id] = g
            if n._vjp is None:
                continue
            needs = tuple(isinstance(p, Node) and p.id in live for p in n.parents)
            if not any(needs):
                continue
            if create_graph:
                parent_grads = n._vjp(g, n.parents, n, needs)
            else:
                args = tuple(p.value if isinstance(p, Node) else p for p in n.parents)
                parent_grads = n._vjp(value_of(g), args, n.value, needs)
            for p, need, pg in zip(n.parents, needs, parent_grads):
                if not need or pg is None:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)

        out = []
        for w in wrt:
            g = results.get(w.id)
            if g is None:
                g = np.zeros_like(w.value)
            if not create_graph:
                g = value_of(g)
                w.grad = g
            out.append(g)
        return out


def grad(root, wrt, create_graph=None):
    """Shorthand for ``root.tape.backward(root, wrt, create_graph)``."""
    if not isinstance(root, Node):
        return [np.zeros(shape_of(w)) for w in wrt]
    return root.tape.backward(root, wrt, create_graph)


# ---------------------------------------------------------------- helpers

def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x):
    if isinstance(x, Node):
        return x.value
    if isinstance(x, np.ndarray):
        return x
    return np.asarray(x, dtype=np.float64)


def shape_of(x):
    return value_of(x).shape


def _check_finite(op, value):
    # a sum is non-finite whenever any element is; confirm to rule out overflow
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.add.reduce(value, axis=None) if value.ndim else value
    if not np.isfinite(s) and not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced a non-finite value")


def _record(op, value, inputs, vjp):
    tape = None
    for x in inputs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError(f"{op}: inputs live on different tapes")
    _check_finite(op, value)
    if tape is None:
        return value
    return Node(tape, op, value, tuple(inputs), vjp)


def _any_node(*xs):
    for x in xs:
        if isinstance(x, Node):
            return True
    return False


def _binary_value(op, fn, a, b):
    av, bv = value_of(a), value_of(b)
    try:
        with np.errstate(all="ignore"):
            return fn(av, bv)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {av.shape} and {bv.shape}") from None


def _unary_value(fn, a):
    with np.errstate(all="ignore"):
        return fn(value_of(a))


# ---------------------------------------------------------------- ops

def _vjp_add(g, ins, out, needs):
    a, b = ins
    return (sum_to(g, shape_of(a)) if needs[0] else None,
            sum_to(g, shape_of(b)) if needs[1] else None)


def add(a, b):
    return _record("add", _binary_value("add", np.add, a, b), (a, b), _vjp_add)


def _vjp_sub(g, ins, out, needs):
    a, b = ins
    return (sum_to(g, shape_of(a)) if needs[0] else None,
            neg(sum_to(g, shape_of(b))) if needs[1] else None)


def sub(a, b):
    return _record("sub", _binary_value("sub", np.subtract, a, b), (a, b), _vjp_sub)


def _vjp_mul(g, ins, out, needs):
    a, b = ins
    return (sum_to(mul(g, b), shape_of(a)) if needs[0] else None,
            sum_to(mul(g, a), shape_of(b)) if needs[1] else None)


def mul(a, b):
    return _record("mul", _binary_value("mul", np.multiply, a, b), (a, b), _vjp_mul)


def _vjp_div(g, ins, out, needs):
    a, b = ins
    ga = sum_to(div(g, b), shape_of(a)) if needs[0] else None
    gb = neg(sum_to(div(mul(g, out), b), shape_of(b))) if needs[1] else None
    return ga, gb


def div(a, b):
    if not np.all(value_of(b) != 0.0):
        raise DomainError("div: division by zero")
    return _record("div", _binary_value("div", np.divide, a, b), (a, b), _vjp_div)


def _vjp_neg(g, ins, out, needs):
    return (neg(g),)


def neg(a):
    return _record("neg", np.negative(value_of(a)), (a,), _vjp_neg)


def _t(x):
    return swapaxes(x, -1, -2)


def _vjp_matmul(g, ins, out, needs):
    a, b = ins
    ga = gb = None
    if needs[0]:
        ga = sum_to(matmul(g, _t(b)), shape_of(a))
    if needs[1]:
        gb = sum_to(matmul(_t(a), g), shape_of(b))
    return ga, gb


def matmul(a, b):
    """Matrix product of the last two axes; leading axes broadcast."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {av.shape} and {bv.shape}")
    return _record("matmul", _binary_value("matmul", np.matmul, a, b), (a, b), _vjp_matmul)


def _vjp_broadcast(g, ins, out, needs):
    return (sum_to(g, shape_of(ins[0])),)


def broadcast_to(a, shape):
    shape = tuple(shape)
    av = value_of(a)
    if av.shape == shape:
        return a
    try:
        v = np.broadcast_to(av, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {av.shape} to {shape}") from None
    return _record("broadcast", v, (a,), _vjp_broadcast)


def _reduce_to(v, shape):
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and v.shape[lead + i] != 1)
    r = v.sum(axis=axes, keepdims=True) if axes else v
    return r.reshape(shape)


def _vjp_sum_to(g, ins, out, needs):
    return (broadcast_to(g, shape_of(ins[0])),)


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (the adjoint of :func:`broadcast_to`)."""
    shape = tuple(shape)
    av = value_of(a)
    if av.shape == shape:
        return a
    return _record("sum_to", _reduce_to(av, shape), (a,), _vjp_sum_to)


def _vjp_sum(g, ins, out, needs, axis=None, keepdims=False):
    shp = shape_of(ins[0])
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(ax % len(shp) for ax in axes)
        kept = list(shape_of(g))
        for ax in axes:
            kept.insert(ax, 1)
        g = reshape(g, tuple(kept))
    return (broadcast_to(g, shp),)


def sum(a, axis=None, keepdims=False):
    v = np.sum(value_of(a), axis=axis, keepdims=keepdims)
    v = np.asarray(v, dtype=np.float64)

    def vjp(g, ins, out, needs):
        return _vjp_sum(g, ins, out, needs, axis, keepdims)
    return _record("sum", v, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([av.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _vjp_exp(g, ins, out, needs):
    return (mul(g, out),)


def exp(a):
    return _record("exp", _unary_value(np.exp, a), (a,), _vjp_exp)


def _vjp_log(g, ins, out, needs):
    return (div(g, ins[0]),)


def log(a):
    av = value_of(a)
    if not np.all(av > 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _record("log", np.log(av), (a,), _vjp_log)


def _vjp_sqrt(g, ins, out, needs):
    return (div(mul(g, 0.5), out),)


def sqrt(a):
    av = value_of(a)
    if not np.all(av > 0.0):
        raise DomainError("sqrt: argument must be strictly positive")
    return _record("sqrt", np.sqrt(av), (a,), _vjp_sqrt)


def _vjp_tanh(g, ins, out, needs):
    return (mul(g, sub(1.0, mul(out, out))),)


def tanh(a):
    return _record("tanh", np.tanh(value_of(a)), (a,), _vjp_tanh)


def _sigmoid_value(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _vjp_sigmoid(g, ins, out, needs):
    return (mul(g, mul(out, sub(1.0, out))),)


def sigmoid(a):
    return _record("sigmoid", _sigmoid_value(np.asarray(value_of(a), dtype=np.float64)),
                   (a,), _vjp_sigmoid)


def _vjp_relu(g, ins, out, needs):
    return (mul(g, (value_of(ins[0]) > 0.0).astype(np.float64)),)


def relu(a):
    return _record("relu", np.maximum(value_of(a), 0.0), (a,), _vjp_relu)


def _vjp_softplus(g, ins, out, needs):
    return (mul(g, sigmoid(ins[0])),)


def softplus(a):
    return _record("softplus", np.logaddexp(0.0, value_of(a)), (a,), _vjp_softplus)


def _vjp_square(g, ins, out, needs):
    return (mul(g, mul(ins[0], 2.0)),)


def square(a):
    return _record("square", _unary_value(np.square, a), (a,), _vjp_square)


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    try:
        v = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(x.shape) for x in vals)) from None
    ax = axis % v.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in vals])

    def vjp(g, ins, out, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            key = [slice(None)] * v.ndim
            key[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            res.append(getitem(g, tuple(key)))
        return res
    return _record("concat", v, tuple(xs), vjp)


def _scatter(g, key, shape):
    """Adjoint of ``getitem``: place ``g`` at ``key`` inside zeros of ``shape``."""
    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def fwd(gv):
        z = np.zeros(shape)
        if fancy:
            np.add.at(z, key, gv)
        else:
            z[key] = gv
        return z

    def vjp(gg, ins, out, needs):
        return (getitem(gg, key),)
    return _record("scatter", fwd(value_of(g)), (g,), vjp)


def getitem(a, key):
    """Slice or index ``a`` (basic slicing and integer arrays)."""
    av = value_of(a)
    try:
        v = np.array(av[key], dtype=np.float64)
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {av.shape}") from None
    shape = av.shape

    def vjp(g, ins, out, needs):
        return (_scatter(g, key, shape),)
    return _record("slice", v, (a,), vjp)


def reshape(a, shape):
    av = value_of(a)
    try:
        v = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {av.shape} to {shape}") from None
    old = av.shape

    def vjp(g, ins, out, needs):
        return (reshape(g, old),)
    return _record("reshape", v, (a,), vjp)


def swapaxes(a, i, j):
    def vjp(g, ins, out, needs):
        return (swapaxes(g, i, j),)
    return _record("swapaxes", np.swapaxes(value_of(a), i, j), (a,), vjp)


# ---------------------------------------------------------------- densities

_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(x, mu, sigma):
    """Summed log N(x; mu, sigma^2) over all (broadcast) elements."""
    sv = value_of(sigma)
    if not np.all(sv > 0.0):
        raise DomainError("gaussian_log_density: sigma must be strictly positive")
    var = square(sigma)
    resid = sub(x, mu)
    terms = add(mul(log(var), -0.5), mul(div(square(resid), var), -0.5))
    terms = add(terms, -0.5 * _LOG_2PI)
    n_total = np.broadcast_shapes(shape_of(x), shape_of(mu), sv.shape)
    return sum(broadcast_to(terms, n_total))


def gaussian_kl_to_standard(mu, sigma, axis=None):
    """KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1).

    With ``axis`` given, the sum runs over that axis only (one KL per row).
    """
    sv = value_of(sigma)
    if not np.all(sv > 0.0):
        raise DomainError("gaussian_kl_to_standard: sigma must be strictly positive")
    var = square(sigma)
    inner = sub(sub(add(square(mu), var), log(var)), 1.0)
    return mul(sum(inner, axis=axis), 0.5)


# ---------------------------------------------------------------- oracle

def finite_difference_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` (any shape)."""
    if not h > 0:
        raise ValueError("finite_difference_grad: step must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    out = np.empty(flat.size)
    for d in range(flat.size):
        orig = flat[d]
        flat[d] = orig + h
        fp = float(f(theta))
        flat[d] = orig - h
        fm = float(f(theta))
        flat[d] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"finite_difference_grad: non-finite evaluation at coordinate {d}")
        out[d] = (fp - fm) / (2.0 * h)
    return out.reshape(theta.shape)


def relative_error(a, b) -> float:
    """``||a - b|| / max(1e-8, ||a|| + ||b||)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(b)))
