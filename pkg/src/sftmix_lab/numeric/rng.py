"""Seeded random streams and a Gamma-ratio Beta sampler."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError


class SeededRng:
    """PCG64 stream whose state can be captured and restored exactly."""

    algorithm = "PCG64"

    def __init__(self, seed: int | list[int] = 0):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def _log_gamma_ge1(shape: float, n: int, rng: SeededRng) -> np.ndarray:
    # Marsaglia & Tsang (2000) squeeze/rejection, valid for shape >= 1.
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        x = rng.normal(todo.size)
        u = rng.uniform(todo.size)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.where(ok, np.log(np.where(ok, v, 1.0)), 0.0)
            accept = ok & (np.log(u) < 0.5 * x * x + d - d * v + d * logv)
        out[todo[accept]] = np.log(d) + logv[accept]
        todo = todo[~accept]
    return out


def log_gamma_variates(shape: float, n: int, rng: SeededRng) -> np.ndarray:
    """Logarithms of ``n`` Gamma(shape, 1) draws.

    Shapes below one use the boost ``G(a) = G(a + 1) * U**(1/a)`` in log space,
    so draws never underflow to zero.
    """
    if not shape > 0:
        raise InvalidInputError(f"gamma shape must be positive, got {shape}")
    if shape >= 1.0:
        return _log_gamma_ge1(shape, n, rng)
    base = _log_gamma_ge1(shape + 1.0, n, rng)
    u = rng.uniform(n)
    return base + np.log(u) / shape


def sample_beta(alpha: float, rng: SeededRng, size: int | None = None):
    """Draw from Beta(alpha, alpha) as X / (X + Y) with X, Y ~ Gamma(alpha)."""
    if not (isinstance(alpha, (int, float, np.floating)) and np.isfinite(alpha) and alpha > 0):
        raise InvalidInputError(f"alpha must be a positive real, got {alpha!r}")
    n = 1 if size is None else int(size)
    lx = log_gamma_variates(float(alpha), n, rng)
    ly = log_gamma_variates(float(alpha), n, rng)
    # x / (x + y) = 1 / (1 + exp(ly - lx)), stable for tiny draws.
    draws = 1.0 / (1.0 + np.exp(ly - lx))
    return float(draws[0]) if size is None else draws
