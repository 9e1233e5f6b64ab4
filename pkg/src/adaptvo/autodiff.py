"""Array-valued reverse-mode automatic differentiation.

A small tape of numpy float64 arrays, just enough to differentiate the
online-learning objective with respect to refiner parameters: elementwise
arithmetic, matmul, tanh/softplus, reductions, 2-D slicing, and bilinear
sampling that is differentiable in both the source raster and the sample
coordinates. Gradient accumulation order is fixed by graph construction
order, so repeated backward passes over identical graphs are bit-identical.
"""

from __future__ import annotations

import numpy as np


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = grad
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False, parents=(), vjp=None):
        self.value = _as_value(value)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    # -- operator sugar ------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse-mode sweep from a scalar-valued node."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar-valued tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a graph with no trainable inputs")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None:
                continue
            gout = node.grad
            if gout is None:
                continue
            for parent, g in zip(node._parents, node._vjp(gout)):
                if not parent.requires_grad or g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root: Tensor):
    """Iterative DFS post-order over grad-requiring nodes."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise arithmetic (full numpy broadcasting)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value - b.value,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    inv = 1.0 / b.value
    return Tensor(
        a.value * inv,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * inv, a.shape),
            _unbroadcast(-g * a.value * inv * inv, b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value @ b.value,
        parents=(a, b),
        vjp=lambda g: (g @ b.value.T, a.value.T @ g),
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return Tensor(t, parents=(x,), vjp=lambda g: (g * (1.0 - t * t),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)) computed stably; derivative is sigmoid(x)."""
    x = as_tensor(x)
    v = np.logaddexp(0.0, x.value)
    sig = 1.0 / (1.0 + np.exp(-x.value))
    return Tensor(v, parents=(x,), vjp=lambda g: (g * sig,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.value)
    return Tensor(np.abs(x.value), parents=(x,), vjp=lambda g: (g * s,))


def detach(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.value)


def where_mask(mask: np.ndarray, x, fill: float) -> Tensor:
    """Constant-mask select: keeps graph values where mask, constant elsewhere."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    return Tensor(
        np.where(m, x.value, fill),
        parents=(x,),
        vjp=lambda g: (np.where(m, g, 0.0),),
    )


# ---------------------------------------------------------------------------
# reductions and shaping


def tsum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return Tensor(
        np.sum(x.value),
        parents=(x,),
        vjp=lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    shape = x.shape
    return Tensor(
        np.mean(x.value),
        parents=(x,),
        vjp=lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor(
        x.value.reshape(shape),
        parents=(x,),
        vjp=lambda g: (g.reshape(old),),
    )


def slice2d(x, rs: int, re: int, cs: int, ce: int) -> Tensor:
    """2-D slice x[rs:re, cs:ce] with zero-padding adjoint."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rs:re, cs:ce] = g
        return (out,)

    return Tensor(x.value[rs:re, cs:ce].copy(), parents=(x,), vjp=vjp)


# ---------------------------------------------------------------------------
# bilinear sampling differentiable in source and coordinates


def bilinear(src, u, v) -> Tensor:
    """Sample ``src`` at continuous (u, v); coordinates are clipped to the
    raster so callers must mask out-of-bounds lanes themselves."""
    src, u, v = as_tensor(src), as_tensor(u), as_tensor(v)
    sv = src.value
    h, w = sv.shape
    x0 = np.clip(np.floor(u.value).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v.value).astype(np.int64), 0, h - 2)
    fx = u.value - x0
    fy = v.value - y0
    s00 = sv[y0, x0]
    s01 = sv[y0, x0 + 1]
    s10 = sv[y0 + 1, x0]
    s11 = sv[y0 + 1, x0 + 1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * s00 + w01 * s01 + w10 * s10 + w11 * s11

    def vjp(g):
        grads = []
        if src.requires_grad:
            gs = np.zeros_like(sv)
            np.add.at(gs, (y0, x0), g * w00)
            np.add.at(gs, (y0, x0 + 1), g * w01)
            np.add.at(gs, (y0 + 1, x0), g * w10)
            np.add.at(gs, (y0 + 1, x0 + 1), g * w11)
            grads.append(gs)
        else:
            grads.append(None)
        # d/du: lerp of horizontal differences; d/dv symmetric
        grads.append(g * ((1 - fy) * (s01 - s00) + fy * (s11 - s10)))
        grads.append(g * ((1 - fx) * (s10 - s00) + fx * (s11 - s01)))
        return tuple(grads)

    return Tensor(out, parents=(src, u, v), vjp=vjp)
