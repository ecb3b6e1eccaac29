"""Array-level softmax, soft-label cross-entropy and a finite-difference oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import InvalidInputError, ShapeError


def as_dense(x, name: str = "array") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax(logits) -> np.ndarray:
    z = as_dense(logits, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_dense(logits, "logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_soft(target, logits):
    """``-sum_k target_k * log softmax(logits)_k`` along the last axis.

    Returns a float for 1-D inputs and an array of row losses otherwise.
    """
    t = as_dense(target, "target")
    z = as_dense(logits, "logits")
    if t.shape != z.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {z.shape}")
    if np.any(t < 0):
        raise InvalidInputError("target has negative entries")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-9):
        raise InvalidInputError("target rows must sum to 1")
    out = -(t * log_softmax(z)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float:
    p = as_dense(p, "p")
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise InvalidInputError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-12) -> float:
    """Normwise relative error ``max|a - b| / max(max|a|, max|b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.size:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), floor)
    return float(np.abs(a - b).max()) / scale
