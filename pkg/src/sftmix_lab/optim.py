"""AdamW with decoupled weight decay and a warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: AdamState,
    step: int,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update; ``step`` counts updates starting at 1."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or moments.m[name].shape != p.shape:
            raise ShapeError(f"{name}: parameter {p.shape}, gradient {g.shape}")
        m = beta1 * moments.m[name] + (1.0 - beta1) * g
        v = beta2 * moments.v[name] + (1.0 - beta2) * (g * g)
        decayed = p - lr * weight_decay * p
        new_p[name] = decayed - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_ratio)
    if step < w:
        return peak_lr * step / w
    if total_steps == w:
        return peak_lr
    progress = (step - w) / (total_steps - w)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}
