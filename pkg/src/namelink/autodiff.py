"""Minimal reverse-mode differentiation over numpy arrays.

Operations executed inside a :class:`Tape` context record a backward
closure. ``Tape.backward`` then replays them in reverse creation order,
which is a valid topological order because every node is created after its
inputs. Outside a tape the same functions run as plain numpy code.

Only the operations the encoder and losses need are provided; several are
fused (layer norm, softmax, log-softmax, GELU, row normalisation) so their
gradients are computed in closed form rather than through many tiny nodes.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Records differentiable operations executed within its context."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: Tensor, loss_gradient: float = 1.0) -> None:
        """Accumulate ``d(loss_gradient * loss)/dx`` into ``x.grad`` for every leaf."""
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss.grad = np.full_like(loss.data, loss_gradient, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        # intermediate gradients are not needed after the sweep
        for node in self.nodes:
            node.grad = None
            node._backward = None
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with matching leading dimensions."""
    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (..., d_in)."""
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,),
                   lambda g: _accumulate(a, g.transpose(inverse)))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data, dtype=np.float64)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` gathered at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(table.data, dtype=np.float64)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, full)

    return _result(table.data[ids], (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


# ---------------------------------------------------------------------------
# fused nonlinearities

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accumulate(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def masked_log_softmax(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Log-softmax over entries where ``mask`` is true; masked entries yield 0.

    Slices with no valid entry produce zeros and receive no gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    big = np.where(mask, x.data, -np.inf)
    peak = big.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - peak, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    out = np.where(mask, x.data - peak - np.log(safe), 0.0)
    prob = e / safe

    def backward(g):
        g = np.where(mask, g, 0.0)
        _accumulate(x, g - prob * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner))

    return _result(out, (x,), backward)


def normalize_rows(x: Tensor) -> Tensor:
    """``x / ||x||`` along the last axis. Zero rows map to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = x.data / safe

    def backward(g):
        _accumulate(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe)

    return _result(y, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))``, computed stably; equals ``-log sigmoid(-x)``."""
    a = x.data
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    def backward(g):
        _accumulate(x, g * _sigmoid(a))

    return _result(out, (x,), backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(a) -> np.ndarray:
    return _sigmoid(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# gradient checking

def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` using Frobenius norms."""
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / scale
