"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operation that produced
it. Calling :func:`backward` on a scalar tensor walks the recorded graph in
reverse topological order and accumulates gradients into every tensor that
requires them.

Only the primitives needed by the transformer and the Mixup objective are
provided; each primitive carries its own vector-Jacobian product.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_ids = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self.name = name

    @classmethod
    def _make(cls, data, parents, vjp) -> "Tensor":
        out = cls(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), vjp)

    # -- shape ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting; both operands ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, w = a.data, b.data
    if w.ndim == 2:
        # Fold leading axes so BLAS sees one 2-D product.
        x2 = x.reshape(-1, x.shape[-1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ w.T).reshape(x.shape), x2.T @ g2

        out = (x2 @ w).reshape(*x.shape[:-1], w.shape[1])
        return Tensor._make(out, (a, b), vjp)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(w, -1, -2), x.shape)
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, w.shape)
        return ga, gb

    return Tensor._make(x @ w, (a, b), vjp)


def where_mask(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Replace entries where ``mask`` is False by the constant ``fill``."""
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(
        np.where(mask, x.data, fill), (x,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), x.shape),)
    )


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. Masked-out entries get probability exactly 0.

    Every slice must keep at least one unmasked entry.
    """
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        zm = np.where(mask, z, -np.inf)
        shifted = zm - zm.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), vjp)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise soft-label cross-entropy ``-sum_k t_k log softmax(s)_k``.

    ``target`` is a constant array of the same shape as ``logits``; the
    result drops the last axis.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"target {t.shape} does not match logits {logits.shape}")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = -(t * logp).sum(axis=-1)
    p = np.exp(logp)
    tsum = t.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (g[..., None] * (p * tsum - t),)

    return Tensor._make(out, (logits,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    g_, b_ = gamma.data, beta.data
    d = z.shape[-1]

    def vjp(g):
        dxhat = g * g_
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return Tensor._make(xhat * g_ + b_, (x, gamma, beta), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * (z * z * z))
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), vjp)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and parent._id not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    When ``wrt`` is given, the gradients of those tensors are returned in the
    same order; tensors not reachable from ``root`` get zeros.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    if root.requires_grad:
        for node in reversed(_topological(root)):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
    if wrt is None:
        return None
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
