"""Confidence-paired Mixup on last-layer hidden states, and the training objectives.

The NTP term is the token-mean cross-entropy over scored response positions.
The Mixup term pairs each confident example with an unconfident one, mixes
their hidden states and one-hot labels position by position with a shared
``lambda ~ Beta(alpha, alpha)``, truncates to the shorter response, and scores
the mixed states through the same head ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import InstructionExample, TokenizedBatch, collate
from .errors import ConfigError, ContractError, InvalidInputError, ShapeError
from .model import Parameters, forward, graph_leaves, lm_head
from .numeric.autograd import Tensor, backward, cross_entropy, matmul
from .numeric.primitives import (
    cross_entropy_soft,
    finite_diff_grad,
    max_relative_error,
    softmax,
)
from .numeric.rng import SeededRng, sample_beta

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class MixupPair:
    confident_id: str
    unconfident_id: str
    lam: float
    trunc_len: int

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.trunc_len < 1:
            raise InvalidInputError("trunc_len must be positive")


@dataclass
class MixupBatch:
    """Index-aligned confident/unconfident ids; ``lambdas`` filled once sampled."""

    confident_ids: list[str]
    unconfident_ids: list[str]
    lambdas: np.ndarray | None = None

    def __post_init__(self):
        if len(self.confident_ids) != len(self.unconfident_ids):
            raise ContractError("confident and unconfident halves must have equal size")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("an id appears more than once in the batch")

    def __len__(self) -> int:
        return len(self.confident_ids)

    @property
    def ids(self) -> list[str]:
        return self.confident_ids + self.unconfident_ids

    def pairs(self, scored_lengths: dict[str, int]) -> list[MixupPair]:
        if self.lambdas is None:
            raise ContractError("lambdas have not been sampled for this batch")
        return [
            MixupPair(c, u, float(lam), min(scored_lengths[c], scored_lengths[u]))
            for c, u, lam in zip(self.confident_ids, self.unconfident_ids, self.lambdas)
        ]


@dataclass
class InterpolatedTargets:
    hidden: np.ndarray | Tensor   # [N', d]
    labels: np.ndarray            # [N', V]


def pair_epoch(split, batch_size: int, rng: SeededRng) -> list[MixupBatch]:
    """Shuffle both halves independently, zip them and chunk into batches of B/2 pairs."""
    if batch_size <= 0 or batch_size % 2:
        raise ConfigError(f"batch size must be a positive even number, got {batch_size}")
    conf, unconf = list(split.confident_ids), list(split.unconfident_ids)
    if len(conf) != len(unconf):
        raise ContractError(
            f"confident ({len(conf)}) and unconfident ({len(unconf)}) subsets differ in size"
        )
    pc = rng.permutation(len(conf))
    pu = rng.permutation(len(unconf))
    conf = [conf[i] for i in pc]
    unconf = [unconf[i] for i in pu]
    half = batch_size // 2
    return [
        MixupBatch(conf[i : i + half], unconf[i : i + half])
        for i in range(0, len(conf), half)
    ]


def sample_lambda(alpha: float, rng: SeededRng, size: int | None = None):
    return sample_beta(alpha, rng, size)


def interpolate(Zc, Zu, yc: Sequence[int], yu: Sequence[int], lam: float, vocab_size: int):
    """Mix hidden rows and one-hot labels over the first ``min(Nc, Nu)`` positions.

    ``Zc``/``Zu`` may be arrays or graph tensors; hidden-state mixing stays
    differentiable in the latter case.
    """
    if Zc.shape[-1] != Zu.shape[-1]:
        raise ShapeError(f"hidden widths differ: {Zc.shape[-1]} vs {Zu.shape[-1]}")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    n = min(Zc.shape[0], Zu.shape[0], len(yc), len(yu))
    labels = np.zeros((n, vocab_size))
    rows = np.arange(n)
    labels[rows, np.asarray(yc[:n])] += lam
    labels[rows, np.asarray(yu[:n])] += 1.0 - lam
    hidden = Zc[:n] * lam + Zu[:n] * (1.0 - lam)
    return InterpolatedTargets(hidden=hidden, labels=labels)


def _reduce(losses: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    raise ConfigError(f"unknown reduction {reduction!r}")


def ntp_term(
    logits: Tensor,
    batch: TokenizedBatch,
    rows: Sequence[int] | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy of the next-token predictions at scored response positions."""
    mask = batch.loss_mask.copy()
    if rows is not None:
        keep = np.zeros(mask.shape[0], dtype=bool)
        keep[list(rows)] = True
        mask &= keep[:, None]
    B, L, V = logits.shape
    flat = np.flatnonzero(mask.reshape(-1))
    picked = logits.reshape(B * L, V)[flat]
    target = np.zeros((flat.size, V))
    target[np.arange(flat.size), batch.targets.reshape(-1)[flat]] = 1.0
    return _reduce(cross_entropy(picked, target), reduction)


def mixup_positions(
    batch: TokenizedBatch,
    conf_rows: Sequence[int],
    unconf_rows: Sequence[int],
    lambdas: Sequence[float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flat hidden-state indices, per-position lambdas and soft labels for a batch."""
    L = batch.tokens.shape[1]
    targets = batch.targets
    idx_c, idx_u, lam_rows, yc, yu = [], [], [], [], []
    for rc, ru, lam in zip(conf_rows, unconf_rows, lambdas):
        n = min(batch.scored_length(rc), batch.scored_length(ru))
        sc, su = batch.response_start(rc), batch.response_start(ru)
        idx_c.append(rc * L + sc + np.arange(n))
        idx_u.append(ru * L + su + np.arange(n))
        lam_rows.append(np.full(n, float(lam)))
        yc.append(targets[rc, sc : sc + n])
        yu.append(targets[ru, su : su + n])
    idx_c, idx_u = np.concatenate(idx_c), np.concatenate(idx_u)
    lam = np.concatenate(lam_rows)
    return idx_c, idx_u, lam, (np.concatenate(yc), np.concatenate(yu))


def mixup_term(
    hidden: Tensor,
    W: Tensor,
    batch: TokenizedBatch,
    conf_rows: Sequence[int],
    unconf_rows: Sequence[int],
    lambdas: Sequence[float],
    reduction: str = "mean",
) -> Tensor:
    """Mixup regularizer computed from an existing forward pass."""
    B, L, d = hidden.shape
    V = W.shape[1]
    idx_c, idx_u, lam, (yc, yu) = mixup_positions(batch, conf_rows, unconf_rows, lambdas)
    flat = hidden.reshape(B * L, d)
    mixed = flat[idx_c] * lam[:, None] + flat[idx_u] * (1.0 - lam)[:, None]
    labels = np.zeros((lam.size, V))
    rows = np.arange(lam.size)
    labels[rows, yc] += lam
    labels[rows, yu] += 1.0 - lam
    return _reduce(cross_entropy(matmul(mixed, W), labels), reduction)


def mixup_loss(
    params: Parameters,
    confident: Sequence[InstructionExample],
    unconfident: Sequence[InstructionExample],
    lambdas: Sequence[float],
    reduction: str = "mean",
) -> float:
    """Mixup loss for explicit pairs ``confident[i] <-> unconfident[i]``."""
    if len(confident) != len(unconfident) or len(lambdas) != len(confident):
        raise ContractError("need one lambda per confident/unconfident pair")
    batch = collate(list(confident) + list(unconfident), params.config.max_seq_len)
    leaves = graph_leaves(params)
    out = forward(leaves, batch.tokens, batch.pad_mask)
    k = len(confident)
    term = mixup_term(
        out.hidden, leaves["lm_head"], batch, range(k), range(k, 2 * k), lambdas, reduction
    )
    return term.item()


def ntp_loss(
    params: Parameters,
    examples: Sequence[InstructionExample],
    truncate_to: Sequence[int] | None = None,
    reduction: str = "mean",
) -> float:
    """NTP loss of ``examples``; ``truncate_to[i]`` keeps only the first scored positions."""
    batch = collate(list(examples), params.config.max_seq_len)
    if truncate_to is not None:
        mask = np.zeros_like(batch.response_mask)
        for r, n in enumerate(truncate_to):
            start = batch.lengths[r][0] + 2
            mask[r, start : start + n] = True
        batch.response_mask = mask & batch.response_mask
    out = forward(params, batch.tokens, batch.pad_mask)
    return ntp_term(out.logits, batch, reduction=reduction).item()


def sftmix_loss(ntp, mix, mu: float):
    if mu < 0:
        raise ConfigError(f"mu must be non-negative, got {mu}")
    return ntp + mix * mu


# -- gradient analysis of the mixed head term ---------------------------------


def head_gradient_closed_form(Z: np.ndarray, Y: np.ndarray, W: np.ndarray) -> np.ndarray:
    """d/dW of H(Y, softmax(Z^T W)) for one position: outer(Z, softmax(Z^T W) - Y)."""
    Z = np.asarray(Z, dtype=np.float64)
    return np.outer(Z, softmax(Z @ W) - np.asarray(Y, dtype=np.float64))


def head_gradient_autodiff(Z: np.ndarray, Y: np.ndarray, W: np.ndarray) -> np.ndarray:
    Wt = Tensor(W, requires_grad=True)
    loss = cross_entropy(matmul(Tensor(np.asarray(Z).reshape(1, -1)), Wt), np.asarray(Y)[None])
    (g,) = backward(loss.sum(), [Wt])
    return g


def head_gradient_check(Z, Y, W, h: float = 1e-6) -> dict:
    """Compare the closed-form head gradient with autodiff and finite differences."""
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    closed = head_gradient_closed_form(Z, Y, W)
    auto = head_gradient_autodiff(Z, Y, W)

    def f(w):
        return cross_entropy_soft(Y, Z @ w)

    fd = finite_diff_grad(f, W, h)
    return {
        "closed_form": closed,
        "rel_err_autodiff": max_relative_error(closed, auto),
        "rel_err_finite_diff": max_relative_error(closed, fd),
    }


def non_decomposition_witness(Zc, Zu, W, lam: float) -> float:
    """``max |softmax(mixed Z W) - (lam softmax(Zc W) + (1-lam) softmax(Zu W))|``."""
    Zc = np.asarray(Zc, dtype=np.float64)
    Zu = np.asarray(Zu, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    mixed = softmax((lam * Zc + (1.0 - lam) * Zu) @ W)
    blend = lam * softmax(Zc @ W) + (1.0 - lam) * softmax(Zu @ W)
    return float(np.max(np.abs(mixed - blend)))
