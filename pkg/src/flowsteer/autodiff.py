"""Small reverse-mode autodiff over float64 numpy arrays.

Only the primitives the velocity network and its losses need are provided.
Each op records its parents and a closure that pushes the output gradient
back to them; ``Tensor.backward`` replays the tape in reverse topological
order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that were broadcast when the forward op ran
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def _child(self, data, parents: tuple, op: str) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = lift(other)
        out = self._child(self.data + other.data, (self, other), "add")

        def _bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-lift(other))

    def __rsub__(self, other) -> "Tensor":
        return lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = lift(other)
        out = self._child(self.data * other.data, (self, other), "mul")

        def _bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        out._backward = _bw
        return out

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def square(self) -> "Tensor":
        out = self._child(self.data * self.data, (self,), "square")

        def _bw(g):
            self._accum(2.0 * self.data * g)

        out._backward = _bw
        return out

    def sum(self) -> "Tensor":
        out = self._child(np.sum(self.data), (self,), "sum")

        def _bw(g):
            self._accum(np.broadcast_to(g, self.shape))

        out._backward = _bw
        return out

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def silu(self) -> "Tensor":
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out = self._child(self.data * sig, (self,), "silu")

        def _bw(g):
            self._accum(g * sig * (1.0 + self.data * (1.0 - sig)))

        out._backward = _bw
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = self._child(y, (self,), "tanh")

        def _bw(g):
            self._accum(g * (1.0 - y * y))

        out._backward = _bw
        return out

    def __getitem__(self, idx) -> "Tensor":
        out = self._child(self.data[idx], (self,), "index")

        def _bw(g):
            acc = np.zeros_like(self.data)
            np.add.at(acc, idx, g)
            self._accum(acc)

        out._backward = _bw
        return out

    def reshape(self, *shape: int) -> "Tensor":
        out = self._child(self.data.reshape(*shape), (self,), "reshape")

        def _bw(g):
            self._accum(g.reshape(self.shape))

        out._backward = _bw
        return out

    # -- reverse pass -------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = _as_array(seed).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = a._child(a.data @ b.data, (a, b), "matmul")

    def _bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._backward = _bw
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [lift(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = parts[0]._child(data, tuple(parts), "concat")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def _bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    out._backward = _bw
    return out


def take_rows(table: Tensor, rows: np.ndarray) -> Tensor:
    """Gather ``table[rows]``; gradients scatter-add back into the table."""
    rows = np.asarray(rows, dtype=np.int64)
    out = table._child(table.data[rows], (table,), "take_rows")

    def _bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, rows, g)
        table._accum(acc)

    out._backward = _bw
    return out


# -- functional transforms ----------------------------------------------------


def grad(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of a scalar-valued ``f`` at ``x``."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {y.shape}")
    y.backward()
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def vjp(g: Callable[[Tensor], Tensor], x, w) -> np.ndarray:
    """``J(x)^T w`` for a vector-valued ``g`` via one reverse pass."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = g(xt)
    w = _as_array(w)
    if w.shape != y.shape:
        raise DimensionError(f"cotangent shape {w.shape} != output shape {y.shape}")
    y.backward(w)
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def jvp(g: Callable[[Tensor], Tensor], x, v, h: float = 1e-5) -> np.ndarray:
    """``J(x) v`` by central differences along ``v``.

    The step is scaled so that ``h * |v|`` stays near ``h`` regardless of the
    probe's magnitude; exact for affine ``g`` up to rounding.
    """
    x = _as_array(x)
    v = _as_array(v)
    if x.shape != v.shape:
        raise DimensionError(f"tangent shape {v.shape} != input shape {x.shape}")
    scale = float(np.max(np.abs(v)))
    if scale == 0.0:
        return np.zeros_like(g(Tensor(x)).data)
    step = h / scale
    hi = g(Tensor(x + step * v)).data
    lo = g(Tensor(x - step * v)).data
    return (hi - lo) / (2.0 * step)


def spectral_norm(
    g: Callable[[Tensor], Tensor], x, iters: int = 20, rng: np.random.Generator | None = None
) -> float:
    """Largest singular value of the Jacobian of ``g`` at ``x``.

    Power iteration on ``J^T J`` using a forward (jvp) and a reverse (vjp)
    probe per iteration.
    """
    x = _as_array(x)
    rng = rng or np.random.default_rng(0)
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        jv = jvp(g, x, v)
        sigma = float(np.linalg.norm(jv))
        if sigma == 0.0:
            return 0.0
        w = vjp(g, x, jv / sigma)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.linalg.norm(jvp(g, x, v)))
