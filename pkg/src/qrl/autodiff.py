"""Minimal reverse-mode autodiff on numpy arrays.

Supports exactly the operations the rest of the package trains with:
affine layers, relu, the interval-sweep ops of the quasimetric head
(sorting gathers, running max), softplus/sigmoid, and batch reductions.
Gradients are exact subgradients; tie-breaking rules are fixed so runs
are deterministic (see the individual ops).
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum over prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over broadcast (size-1) axes
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph. Wraps a float64 ndarray.

    Backward closures receive the upstream gradient as an argument and
    reference only parent nodes, so graphs are reference-acyclic and are
    reclaimed by reference counting as soon as the outputs go out of
    scope (no reliance on the cyclic garbage collector).
    """

    __slots__ = ("data", "grad", "_backward", "_prev")

    def __init__(self, data, _prev=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._prev = _prev
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # ---- arithmetic ----

    def __add__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + o.data, (self, o))

        def back(g):
            self._accum(_unbroadcast(g, self.data.shape))
            o._accum(_unbroadcast(g, o.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data - o.data, (self, o))

        def back(g):
            self._accum(_unbroadcast(g, self.data.shape))
            o._accum(_unbroadcast(-g, o.data.shape))

        out._backward = back
        return out

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * o.data, (self, o))

        def back(g):
            self._accum(_unbroadcast(g * o.data, self.data.shape))
            o._accum(_unbroadcast(g * self.data, o.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data @ o.data, (self, o))

        def back(g):
            self._accum(g @ o.data.T)
            o._accum(self.data.T @ g)

        out._backward = back
        return out

    def square(self):
        out = Tensor(self.data * self.data, (self,))
        out._backward = lambda g: self._accum(g * 2.0 * self.data)
        return out

    def sqrt(self):
        r = np.sqrt(self.data)
        out = Tensor(r, (self,))
        out._backward = lambda g: self._accum(g * 0.5 / r)
        return out

    # ---- nonlinearities ----

    def relu(self):
        mask = self.data > 0.0  # subgradient at 0 is 0
        out = Tensor(np.where(mask, self.data, 0.0), (self,))
        out._backward = lambda g: self._accum(g * mask)
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(s, (self,))
        out._backward = lambda g: self._accum(g * s * (1.0 - s))
        return out

    def softplus(self, beta: float = 1.0):
        out = Tensor(softplus(self.data, beta), (self,))
        s = 1.0 / (1.0 + np.exp(-beta * self.data))  # d/dx softplus = sigmoid(beta x)
        out._backward = lambda g: self._accum(g * s)
        return out

    # ---- reductions ----

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), (self,))

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))

        out._backward = back
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / n

    def max(self, axis: int):
        """Max along an axis; gradient flows to the first maximal index."""
        idx = np.argmax(self.data, axis=axis)  # argmax takes first on ties
        out = Tensor(np.take_along_axis(self.data, np.expand_dims(idx, axis), axis).squeeze(axis), (self,))

        def back(g_out):
            g = np.zeros_like(self.data)
            np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(g_out, axis), axis)
            self._accum(g)

        out._backward = back
        return out

    # ---- structural ----

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def gather(self, index: np.ndarray, axis: int = -1):
        """take_along_axis; indices must form a permutation along `axis`."""
        out = Tensor(np.take_along_axis(self.data, index, axis), (self,))

        def back(g_out):
            g = np.zeros_like(self.data)
            np.put_along_axis(g, index, g_out, axis)
            self._accum(g)

        out._backward = back
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], (self,))

        def back(g_out):
            g = np.zeros_like(self.data)
            g[key] = g_out
            self._accum(g)

        out._backward = back
        return out

    def cummax(self, axis: int = -1):
        """Running maximum along last axis; gradient routes to the first
        position attaining each running max."""
        assert axis in (-1, self.data.ndim - 1)
        x = self.data
        cm = np.maximum.accumulate(x, axis=-1)
        n = x.shape[-1]
        prev = np.concatenate(
            [np.full(x.shape[:-1] + (1,), -np.inf), cm[..., :-1]], axis=-1
        )
        isnew = x > prev
        isnew[..., 0] = True
        ar = np.broadcast_to(np.arange(n), x.shape)
        src = np.maximum.accumulate(np.where(isnew, ar, 0), axis=-1)
        out = Tensor(cm, (self,))

        def back(g_out):
            g = np.zeros_like(x)
            np.add.at(g.reshape(-1, n), (np.arange(g.size // n)[:, None], src.reshape(-1, n)), g_out.reshape(-1, n))
            self._accum(g)

        out._backward = back
        return out

    # ---- graph ----

    def backward(self, grad=None):
        """Reverse-mode sweep from this node. `grad` defaults to ones."""
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    bt = b if isinstance(b, Tensor) else Tensor(b)
    mask = a.data >= bt.data
    out = Tensor(np.where(mask, a.data, bt.data), (a, bt))

    def back(g):
        a._accum(_unbroadcast(g * mask, a.data.shape))
        bt._accum(_unbroadcast(g * ~mask, bt.data.shape))

    out._backward = back
    return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    out._backward = back
    return out


def softplus(x, beta: float = 1.0):
    """(1/beta) * log(1 + exp(beta*x)), overflow-safe for large beta*x."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    x = np.asarray(x, dtype=np.float64)
    bx = beta * x
    out = np.where(
        bx > 30.0,
        x + np.exp(-np.where(bx > 30.0, bx, 30.0)) / beta,
        np.log1p(np.exp(np.where(bx > 30.0, 0.0, bx))) / beta,
    )
    return out if out.ndim else float(out)


def softplus_derivative(x, beta: float = 1.0):
    """d/dx softplus(x, beta) = sigmoid(beta*x)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    x = np.asarray(x, dtype=np.float64)
    out = 1.0 / (1.0 + np.exp(-beta * x))
    return out if out.ndim else float(out)


def inverse_softplus(y: float, beta: float = 1.0) -> float:
    """x such that softplus(x, beta) = y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus is positive")
    by = beta * y
    if by > 30.0:
        return float(y)
    return float(np.log(np.expm1(by)) / beta)
