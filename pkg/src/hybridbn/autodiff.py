"""Minimal reverse-mode differentiation over numpy arrays.

Operations are appended to a :class:`Tape` as they execute (a Wengert list);
:meth:`Tape.backward` walks the list in reverse, calling each recorded
vector-Jacobian product.  Only the operations the hybrid model needs are
provided.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g


class Tape:
    def __init__(self):
        self.ops: list = []

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=float))

    def record(self, value, inputs, vjp) -> Var:
        """Register ``value = f(*inputs)``; ``vjp(out_grad)`` returns one grad per input."""
        out = Var(value, any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self.ops.append((out, inputs, vjp))
        return out

    def backward(self, out: Var, seed=None):
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
        for res, inputs, vjp in reversed(self.ops):
            if res.grad is None:
                continue
            grads = vjp(res.grad)
            for v, g in zip(inputs, grads):
                if g is not None and v.requires_grad:
                    v.accumulate(g)

    def clear(self):
        self.ops.clear()

    # ---- operations -------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        return self.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a: Var, b: Var) -> Var:
        return self.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self.record(
            av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
        )

    def matmul(self, a: Var, b: Var) -> Var:
        """``a @ b`` with ``b`` a 2-d weight matrix and ``a`` of any leading shape."""
        av, bv = a.value, b.value

        def vjp(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return self.record(av @ bv, (a, b), vjp)

    def affine(self, x: Var, w: Var, b: Var) -> Var:
        return self.add(self.matmul(x, w), b)

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        return self.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Var) -> Var:
        y = 1.0 / (1.0 + np.exp(-x.value))
        return self.record(y, (x,), lambda g: (g * y * (1.0 - y),))

    def softmax(self, x: Var) -> Var:
        """Softmax over the last axis."""
        z = x.value - x.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return self.record(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))

    def reshape(self, x: Var, shape) -> Var:
        old = x.shape
        return self.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def concat(self, xs, axis: int = -1) -> Var:
        sizes = [v.shape[axis] for v in xs]
        cuts = np.cumsum(sizes)[:-1]
        return self.record(
            np.concatenate([v.value for v in xs], axis=axis),
            tuple(xs),
            lambda g: tuple(np.split(g, cuts, axis=axis)),
        )

    def take(self, x: Var, index) -> Var:
        """``x[index]`` for basic slicing/integer indices."""
        shape = x.shape

        def vjp(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)

        return self.record(x.value[index], (x,), vjp)

    def mean(self, x: Var, axis: int) -> Var:
        n = x.shape[axis]
        shape = x.shape
        return self.record(
            x.value.mean(axis=axis),
            (x,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape) / n,),
        )

    def sum(self, x: Var) -> Var:
        shape = x.shape
        return self.record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def scale(self, x: Var, c: float) -> Var:
        return self.record(x.value * c, (x,), lambda g: (g * c,))

    def one_minus(self, x: Var) -> Var:
        return self.record(1.0 - x.value, (x,), lambda g: (-g,))

    def clamped_log(self, x: Var, lo: float) -> Var:
        """log(clip(x, lo, 1 - lo)); zero gradient where the clip is active."""
        inside = (x.value >= lo) & (x.value <= 1.0 - lo)
        xv = np.clip(x.value, lo, 1.0 - lo)
        return self.record(np.log(xv), (x,), lambda g: (np.where(inside, g / xv, 0.0),))

    def symmetric(self, upper: Var, n: int) -> Var:
        """Symmetric (n, n) matrix with zero diagonal from its strict upper triangle."""
        iu = np.triu_indices(n, 1)
        m = np.zeros((n, n))
        m[iu] = upper.value
        m = m + m.T

        def vjp(g):
            return ((g + g.T)[iu],)

        return self.record(m, (upper,), vjp)

    def edge_max_aggregate(self, g: Var, weights: Var) -> Var:
        """Node-wise max over neighbours j of ``w[i, j] * (g_j - g_i)``.

        ``g`` is (B, n, D); neighbours are the j != i with nonzero weight.
        Nodes without neighbours aggregate to zero.  Ties go to the lowest j.
        """
        gv, w = g.value, weights.value
        B, n, D = gv.shape
        diff = gv[:, None, :, :] - gv[:, :, None, :]  # [b, i, j] = g_j - g_i
        scaled = w[None, :, :, None] * diff
        nbr = (w != 0) & ~np.eye(n, dtype=bool)
        masked = np.where(nbr[None, :, :, None], scaled, -np.inf)
        arg = np.argmax(masked, axis=2)  # (B, n, D)
        has = nbr.any(axis=1)
        out = np.take_along_axis(scaled, arg[:, :, None, :], axis=2)[:, :, 0, :]
        out = np.where(has[None, :, None], out, 0.0)

        def vjp(gr):
            gr = np.where(has[None, :, None], gr, 0.0)
            bi, ii, di = np.meshgrid(np.arange(B), np.arange(n), np.arange(D), indexing="ij")
            jj = arg
            wij = w[ii, jj]
            dg = np.zeros_like(gv)
            np.add.at(dg, (bi, jj, di), gr * wij)
            np.add.at(dg, (bi, ii, di), -gr * wij)
            dw = np.zeros_like(w)
            np.add.at(dw, (ii, jj), gr * diff[bi, ii, jj, di])
            return dg, dw

        return self.record(out, (g, weights), vjp)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class ParameterTape:
    """Flat parameter vector with named segments and a matching gradient buffer.

    Segments are numpy views into ``flat``/``grad`` so an optimizer can update
    everything with one vector operation.
    """

    def __init__(self):
        self._init: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.segments: "OrderedDict[str, tuple[slice, tuple]]" = OrderedDict()
        self.flat = np.zeros(0)
        self.grad = np.zeros(0)
        self.tape = Tape()
        self._leaves: dict[str, Var] = {}

    def add(self, name: str, value) -> None:
        if name in self._init or self.segments:
            raise ValueError(f"cannot add segment {name!r}")
        self._init[name] = np.asarray(value, dtype=float)

    def finalize(self) -> None:
        offset = 0
        for name, arr in self._init.items():
            self.segments[name] = (slice(offset, offset + arr.size), arr.shape)
            offset += arr.size
        self.flat = np.concatenate([a.ravel() for a in self._init.values()]) if self._init else np.zeros(0)
        self.grad = np.zeros_like(self.flat)
        self._init.clear()

    def __contains__(self, name):
        return name in self.segments

    def value(self, name: str) -> np.ndarray:
        sl, shape = self.segments[name]
        return self.flat[sl].reshape(shape)

    def grad_of(self, name: str) -> np.ndarray:
        sl, shape = self.segments[name]
        return self.grad[sl].reshape(shape)

    def leaf(self, name: str) -> Var:
        """Tape variable for a segment (one per step; gradients flow into ``grad``)."""
        if name not in self._leaves:
            self._leaves[name] = Var(self.value(name), requires_grad=True)
        return self._leaves[name]

    def zero_grad(self) -> None:
        """Clear the gradient buffer, the leaf cache and the recorded operations."""
        self.grad[:] = 0.0
        self._leaves.clear()
        self.tape.clear()

    def collect(self) -> np.ndarray:
        for name, v in self._leaves.items():
            if v.grad is not None:
                sl, _ = self.segments[name]
                self.grad[sl] += np.asarray(v.grad).ravel()
        return self.grad

    def names(self):
        return list(self.segments)

    def to_dict(self) -> dict:
        return {name: self.value(name).tolist() for name in self.segments}

    def load_dict(self, d: dict) -> None:
        for name in self.segments:
            self.value(name)[...] = np.asarray(d[name], dtype=float).reshape(self.segments[name][1])


class Adam:
    """Adaptive moment estimation over a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)


def batch_norm(tape: Tape, x: Var, gamma: Var, beta: Var, eps: float = 1e-5):
    """Normalize each feature over every axis but the last; returns (y, mean, var)."""
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    m = int(np.prod([xv.shape[a] for a in axes]))
    mu = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value

    def vjp(g):
        dxhat = g * gv
        sum_d = dxhat.sum(axis=axes)
        sum_dx = (dxhat * xhat).sum(axis=axes)
        dx = inv / m * (m * dxhat - sum_d - xhat * sum_dx)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    y = tape.record(xhat * gv + beta.value, (x, gamma, beta), vjp)
    return y, mu, var
