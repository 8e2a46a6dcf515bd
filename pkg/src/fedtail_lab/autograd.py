"""Reverse-mode autodiff over flat parameter vectors.

A loss is described by a *builder*: a function that receives the parameter
vector as a graph :class:`Node` and returns a scalar node.  Every call to
:func:`value_and_grad` records a fresh :class:`Tape`, so builders are plain
Python and may close over data batches.

Second-order quantities (Hessian-vector products, the dominant Hessian
eigenvalue) are obtained from central differences of gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class AutogradError(ArithmeticError):
    pass


class NonFiniteLoss(AutogradError):
    pass


class NonFiniteGradient(AutogradError):
    pass


class ZeroDirection(AutogradError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


Layout = tuple[Segment, ...]


def make_layout(entries: Iterable[tuple[str, int]]) -> Layout:
    """Pack ``(name, length)`` pairs into contiguous segments."""
    out = []
    offset = 0
    for name, length in entries:
        out.append(Segment(name, offset, int(length)))
        offset += int(length)
    return tuple(out)


def _check_layout(layout: Layout, size: int) -> None:
    pos = 0
    seen = set()
    for seg in layout:
        if seg.offset != pos or seg.length < 0:
            raise ValueError(f"segment {seg.name!r} is not contiguous at offset {pos}")
        if seg.name in seen:
            raise ValueError(f"duplicate segment name {seg.name!r}")
        seen.add(seg.name)
        pos = seg.stop
    if pos != size:
        raise ValueError(f"layout covers {pos} values, array has {size}")


class FlatVector:
    """Immutable float64 array with named contiguous sub-ranges."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout | None = None):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if layout is None:
            layout = (Segment("all", 0, arr.size),)
        layout = tuple(layout)
        _check_layout(layout, arr.size)
        arr.flags.writeable = False
        self.values = arr
        self.layout = layout

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={len(self)}, segments={[s.name for s in self.layout]})"

    def segment(self, name: str) -> Segment:
        for seg in self.layout:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def get(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self.values[seg.offset:seg.stop]

    def mask(self, prefix: str) -> np.ndarray:
        """0/1 mask selecting every segment whose name starts with ``prefix``."""
        m = np.zeros(len(self))
        for seg in self.layout:
            if seg.name.startswith(prefix):
                m[seg.offset:seg.stop] = 1.0
        return m

    def with_values(self, values):
        """Copy carrying this vector's layout (and subclass metadata)."""
        out = object.__new__(type(self))
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.size != len(self):
            raise LengthMismatch(f"expected {len(self)} values, got {arr.size}")
        arr.flags.writeable = False
        out.values = arr
        out.layout = self.layout
        for slot in getattr(type(self), "__slots__", ()):
            if slot not in ("values", "layout"):
                setattr(out, slot, getattr(self, slot))
        return out

    def norm(self) -> float:
        return norm2(self)

    def dot(self, other: "FlatVector") -> float:
        return dot(self, other)


class ParamVector(FlatVector):
    __slots__ = ()


class Gradient(FlatVector):
    __slots__ = ()

    @classmethod
    def like(cls, vec: FlatVector, values=None) -> "Gradient":
        g = object.__new__(cls)
        arr = np.zeros(len(vec)) if values is None else np.array(values, dtype=np.float64).reshape(-1)
        if arr.size != len(vec):
            raise LengthMismatch(f"expected {len(vec)} values, got {arr.size}")
        arr.flags.writeable = False
        g.values = arr
        g.layout = vec.layout
        return g


# -- vector helpers ---------------------------------------------------------

def _arr(x) -> np.ndarray:
    return x.values if isinstance(x, FlatVector) else np.asarray(x, dtype=np.float64).reshape(-1)


def _same_length(a, b) -> tuple[np.ndarray, np.ndarray]:
    xa, xb = _arr(a), _arr(b)
    if xa.size != xb.size:
        raise LengthMismatch(f"lengths differ: {xa.size} vs {xb.size}")
    return xa, xb


def _template(*vs) -> FlatVector | None:
    for v in vs:
        if isinstance(v, FlatVector):
            return v
    return None


def _wrap(values: np.ndarray, *like) -> Gradient:
    tmpl = _template(*like)
    if tmpl is None:
        return Gradient(values)
    return Gradient.like(tmpl, values)


def dot(a, b) -> float:
    xa, xb = _same_length(a, b)
    return float(np.dot(xa, xb))


def norm2(a) -> float:
    x = _arr(a)
    return math.sqrt(float(np.dot(x, x)))


def axpy(alpha: float, a, b) -> Gradient:
    """``alpha * a + b``."""
    xa, xb = _same_length(a, b)
    return _wrap(alpha * xa + xb, a, b)


def scale(alpha: float, a) -> Gradient:
    return _wrap(alpha * _arr(a), a)


# -- graph ------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tape:
    """Append-only node list; append order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> "Node":
        return Node(self, np.asarray(value, dtype=np.float64), (), None)

    def const(self, value) -> "Node":
        return self.leaf(value)

    def backward(self, out: "Node") -> list:
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        grads: list = [None] * len(self.nodes)
        grads[out.index] = np.ones_like(out.value)
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                prev = grads[parent.index]
                grads[parent.index] = pg if prev is None else prev + pg
        return grads


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "index")

    def __init__(self, tape: Tape, value: np.ndarray, parents: tuple, vjp):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        o = self._lift(other)
        sa, sb = self.shape, o.shape
        return Node(self.tape, self.value + o.value, (self, o),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __neg__(self):
        return Node(self.tape, -self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value
        return Node(self.tape, a * b, (self, o),
                    lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value
        return Node(self.tape, a / b, (self, o),
                    lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)))

    def __matmul__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value
        return Node(self.tape, a @ b, (self, o), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return self._lift(other) @ self

    def __getitem__(self, idx):
        v = self.value
        def vjp(g):
            out = np.zeros_like(v)
            out[idx] = g
            return (out,)
        return Node(self.tape, v[idx], (self,), vjp)

    def reshape(self, *shape):
        old = self.shape
        return Node(self.tape, self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def relu(self):
        on = self.value > 0
        return Node(self.tape, np.where(on, self.value, 0.0), (self,), lambda g: (g * on,))

    def exp(self):
        e = np.exp(self.value)
        return Node(self.tape, e, (self,), lambda g: (g * e,))

    def log(self):
        v = self.value
        return Node(self.tape, np.log(v), (self,), lambda g: (g / v,))

    def square(self):
        v = self.value
        return Node(self.tape, v * v, (self,), lambda g: (2.0 * g * v,))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Node(self.tape, np.asarray(self.value.sum(axis=axis, keepdims=keepdims)), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def dot(self, other):
        return (self * other).sum()

    def reverse_grad(self, lam: float):
        """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
        return Node(self.tape, self.value, (self,), lambda g: (-lam * g,))

    def stop_grad(self):
        return self.tape.const(self.value)


def log_softmax(z: Node, axis: int = -1) -> Node:
    """Row-wise log-softmax; the row max is subtracted as a constant."""
    m = np.max(z.value, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def softmax(z: Node, axis: int = -1) -> Node:
    return log_softmax(z, axis).exp()


# -- evaluation -------------------------------------------------------------

Builder = Callable[[Node], Node]


def _run(builder: Builder, values: np.ndarray) -> tuple[Tape, Node, Node]:
    tape = Tape()
    p = tape.leaf(values)
    out = builder(p)
    if not isinstance(out, Node) or out.value.size != 1:
        raise ValueError("builder must return a scalar Node")
    return tape, p, out


def evaluate(builder: Builder, params) -> float:
    _, _, out = _run(builder, _arr(params))
    val = float(out.value)
    if not math.isfinite(val):
        raise NonFiniteLoss(f"loss evaluated to {val}")
    return val


def value_and_grad(builder: Builder, params) -> tuple[float, Gradient]:
    tape, p, out = _run(builder, _arr(params))
    val = float(out.value)
    if not math.isfinite(val):
        raise NonFiniteLoss(f"loss evaluated to {val}")
    g = tape.backward(out)[p.index]
    if g is None:
        g = np.zeros_like(p.value)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient has non-finite entries")
    return val, _wrap(g, params)


def gradient(builder: Builder, params) -> Gradient:
    return value_and_grad(builder, params)[1]


def default_hvp_step(params) -> float:
    return 1e-4 * (1.0 + norm2(params))


def hvp(builder: Builder, params, v, r: float | None = None) -> Gradient:
    """Hessian-vector product from a central difference of gradients."""
    theta = _arr(params)
    vv = _arr(v)
    if vv.size != theta.size:
        raise LengthMismatch(f"lengths differ: {theta.size} vs {vv.size}")
    vnorm = norm2(vv)
    if vnorm == 0.0:
        raise ZeroDirection("hvp direction has zero norm")
    if r is None:
        r = default_hvp_step(theta)
    unit = vv / vnorm
    gp = value_and_grad(builder, theta + r * unit)[1].values
    gm = value_and_grad(builder, theta - r * unit)[1].values
    return _wrap((gp - gm) * (vnorm / (2.0 * r)), params, v)


def power_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def top_eigenvalue(builder: Builder, params, iters: int = 10, seed: int = 0,
                   v0: Sequence[float] | None = None, tol: float = 0.0,
                   return_vector: bool = False):
    """Dominant-magnitude Hessian eigenvalue via power iteration.

    Returns the Rayleigh quotient of the final iterate.  ``v0`` warm-starts the
    iteration; ``tol`` > 0 stops early once the quotient changes by less than
    ``tol`` relative.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    theta = _arr(params)
    if v0 is not None and norm2(v0) > 0:
        v = np.array(v0, dtype=np.float64).reshape(-1)
    else:
        v = power_rng(seed).standard_normal(theta.size)
    v = v / norm2(v)
    r = default_hvp_step(theta)
    est = 0.0
    for k in range(iters):
        hv = hvp(builder, theta, v, r).values
        hn = norm2(hv)
        if hn < 1e-12:
            if k == 0:
                return (0.0, v) if return_vector else 0.0
            break
        prev = est
        est = float(np.dot(v, hv))
        v = hv / hn
        if tol > 0 and k > 0 and abs(est - prev) <= tol * max(abs(est), 1e-12):
            break
    hv = hvp(builder, theta, v, r).values
    est = float(np.dot(v, hv))
    return (est, v) if return_vector else est
