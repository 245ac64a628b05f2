"""Minimal tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to tensors that live on it.
Tensors without a tape are constants: operating only on constants evaluates
eagerly and records nothing, which is what evaluation code relies on.

    tape = Tape()
    w = tape.leaf(np.array([1.0, 2.0]), name="w")
    loss = (w * w).sum()
    grads = tape.backward(loss)      # {"w": array([2., 4.])}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GradientError(ValueError):
    pass


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]
    name: str | None = None


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, parents, vjp, value, name=None) -> "Tensor":
        idx = len(self.nodes)
        assert all(p < idx for p in parents)  # topological order
        self.nodes.append(_Node(op, tuple(parents), vjp, value.shape, name))
        return Tensor(value, self, idx)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        value = np.array(value, dtype=np.float64)
        return self._push("leaf", (), None, value, name)

    def backward(self, root: "Tensor", wrt: Sequence["Tensor"] | None = None):
        """Gradient of scalar ``root`` with respect to leaves.

        Returns a dict keyed by leaf name when ``wrt`` is None (unnamed leaves
        are skipped), otherwise a list aligned with ``wrt``.
        """
        if root.tape is not self:
            raise GradientError("root does not belong to this tape")
        if root.value.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * (root.index + 1)
        grads[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or p < 0:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp

        def _grad_of(i: int) -> np.ndarray:
            g = grads[i] if i < len(grads) else None
            return np.zeros(self.nodes[i].shape) if g is None else g

        if wrt is not None:
            return [_grad_of(t.index) for t in wrt]
        return {
            n.name: _grad_of(i)
            for i, n in enumerate(self.nodes)
            if n.op == "leaf" and n.name is not None
        }


class Tensor:
    """A float64 array optionally attached to a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, index: int = -1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        where = f"tape[{self.index}]" if self.tape is not None else "const"
        return f"Tensor({self.value!r}, {where})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    def sum(self, axis=None): return tsum(self, axis)
    def mean(self, axis=None): return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise GradientError("operands live on different tapes")
            tape = t.tape
    return tape


def _record(op, inputs, value, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    # constants get parent index -1 and receive no gradient
    parents = [t.index if t.tape is not None else -1 for t in inputs]
    return tape._push(op, parents, vjp, value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- binary elementwise -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar operand gives scalar-multiply."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if av.ndim > 2 or bv.ndim > 2:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        # promote vectors to matrices so both cases share one formula
        A = av if av.ndim == 2 else av[None, :]
        B = bv if bv.ndim == 2 else bv[:, None]
        G = g.reshape(A.shape[0], B.shape[1])
        return (G @ B.T).reshape(av.shape), (A.T @ G).reshape(bv.shape)

    return _record("matmul", (a, b), av @ bv, vjp)


# --- unary -----------------------------------------------------------------

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    # split by sign to avoid overflow in exp
    ez = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record("square", (x,), v * v, lambda g: (2.0 * g * v,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record("log", (x,), np.log(v), lambda g: (g / v,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.value)
    return _record("sqrt", (x,), y, lambda g: (0.5 * g / y,))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), x.value.sum(axis=axis), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def detach(x) -> Tensor:
    """Same value, cut from the graph."""
    return Tensor(as_tensor(x).value.copy())


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity when not training."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (x,), x.value * keep, lambda g: (g * keep,))


def gaussian_sample(mu, sigma, rng: np.random.Generator) -> Tensor:
    """Reparametrized draw ``mu + sigma * xi`` with ``xi ~ N(0, I)``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    xi = rng.standard_normal(np.broadcast_shapes(mu.shape, sigma.shape))
    return add(mu, mul(sigma, xi))


# --- optimizers -------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"optimizer_step[{name}]", params[name].shape, g.shape)
    state.step += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] -= state.lr * g
        return params
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


__all__ = [
    "Tape", "Tensor", "ShapeError", "GradientError", "OptimizerState",
    "add", "sub", "mul", "div", "matmul", "tanh", "sigmoid", "square", "exp",
    "log", "sqrt", "tsum", "mean", "detach", "dropout", "gaussian_sample",
    "optimizer_step", "finite_difference", "as_tensor",
]
