"""Self-verification suites run by ``sftmix-lab check``.

Each check returns a :class:`CheckResult` with the measured quantity so the
CLI can print one pass/fail line per property.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import CorpusSpec, collate, generate_corpus
from .mixup import (
    head_gradient_check,
    mixup_loss,
    non_decomposition_witness,
    ntp_loss,
    ntp_term,
)
from .model import (
    ModelConfig,
    Parameters,
    embed,
    forward,
    forward_embeddings,
    graph_leaves,
    init,
)
from .numeric.autograd import Tensor, backward
from .numeric.primitives import finite_diff_grad, softmax
from .numeric.rng import SeededRng, sample_beta


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def ks_uniform(x: np.ndarray) -> float:
    """Kolmogorov-Smirnov statistic of ``x`` against Uniform(0, 1)."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


def tiny_model(seed: int = 0, d_model: int = 8, max_seq_len: int = 48) -> Parameters:
    cfg = ModelConfig(d_model=d_model, n_heads=2, d_ff=16, n_layers=2,
                      max_seq_len=max_seq_len, init_seed=seed, init_std=0.3)
    return init(cfg)


def check_softmax(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=(200, 64))
    p = softmax(logits)
    row_err = float(np.max(np.abs(p.sum(axis=-1) - 1.0)))
    shift_err = float(np.max(np.abs(softmax(logits + 1000.0) - p)))
    ok = row_err <= 1e-12 and shift_err <= 1e-12 and bool(np.all(p >= 0))
    return CheckResult("softmax rows sum to 1 and are shift invariant", ok,
                       f"row err {row_err:.1e}, shift err {shift_err:.1e}")


def check_head_gradient(n: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_ad = worst_fd = 0.0
    for _ in range(n):
        d, V = int(rng.integers(2, 9)), int(rng.integers(2, 12))
        Z = rng.normal(size=d)
        W = rng.normal(size=(d, V))
        Y = rng.dirichlet(np.ones(V))
        r = head_gradient_check(Z, Y, W)
        worst_ad = max(worst_ad, r["rel_err_autodiff"])
        worst_fd = max(worst_fd, r["rel_err_finite_diff"])
    ok = worst_ad <= 1e-10 and worst_fd <= 1e-5
    return CheckResult("closed-form head gradient matches autodiff and finite differences", ok,
                       f"{n} instances, autodiff {worst_ad:.1e}, finite diff {worst_fd:.1e}")


def check_model_gradient(seed: int = 0, coords: int = 60) -> CheckResult:
    """Full-model NTP loss gradient against central differences on sampled coordinates."""
    params = tiny_model(seed)
    examples = generate_corpus(CorpusSpec(num_examples=4, seed=seed + 11, max_len=6))
    leaves = graph_leaves(params, requires_grad=True)
    batch = collate(examples, params.config.max_seq_len)
    loss = ntp_term(forward(leaves, batch.tokens, batch.pad_mask).logits, batch)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in params.names():
        arr = params[name]
        picks = rng.choice(arr.size, size=min(arr.size, max(1, coords // len(params.names()) + 1)),
                           replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)

            def f(v, name=name, idx=idx):
                moved = params.copy()
                moved.arrays[name][idx] = v[0]
                return ntp_loss(moved, examples)

            fd = finite_diff_grad(f, np.array([arr[idx]]), 1e-5)[0]
            auto = leaves[name].grad[idx]
            worst = max(worst, abs(fd - auto) / max(abs(fd), abs(auto), 1e-6))
    return CheckResult("model loss gradient matches finite differences", bool(worst <= 1e-4),
                       f"worst relative error {worst:.1e}")


def check_beta(seed: int = 0) -> CheckResult:
    draws = sample_beta(0.5, SeededRng([seed, 1]), 100_000)
    mean, var = float(draws.mean()), float(draws.var())
    ks = ks_uniform(sample_beta(1.0, SeededRng([seed, 2]), 100_000))
    ok = abs(mean - 0.5) <= 0.01 and abs(var - 0.125) <= 0.005 and ks < 0.01
    return CheckResult("Beta sampler moments (alpha=0.5) and uniformity (alpha=1)", ok,
                       f"mean {mean:.4f}, var {var:.4f}, KS {ks:.4f}")


def check_endpoints(seed: int = 0) -> CheckResult:
    """Mixup at lambda=1 (0) equals the truncated confident (unconfident) NTP loss."""
    params = tiny_model(seed)
    data = generate_corpus(CorpusSpec(num_examples=8, seed=seed + 3, max_len=10))
    conf, unconf = data[:4], data[4:]
    n = [min(len(c.response), len(u.response)) + 1 for c, u in zip(conf, unconf)]
    worst = 0.0
    for lam, side in ((1.0, conf), (0.0, unconf)):
        mix = mixup_loss(params, conf, unconf, [lam] * 4)
        ref = ntp_loss(params, side, truncate_to=n)
        worst = max(worst, abs(mix - ref))
    return CheckResult("Mixup reduces to truncated NTP at lambda in {0, 1}", worst <= 1e-10,
                       f"max abs diff {worst:.1e}")


def check_non_decomposition(seed: int = 0) -> CheckResult:
    worked = non_decomposition_witness([2.0, 0.0], [0.0, 1.0], np.eye(2), 0.5)
    rng = np.random.default_rng(seed)
    hits = 0
    ends = 0.0
    for _ in range(100):
        d, V = 4, 6
        Zc, Zu = rng.normal(size=d), rng.normal(size=d)
        W = rng.normal(size=(d, V))
        lam = float(rng.uniform(0.1, 0.9))
        hits += non_decomposition_witness(Zc, Zu, W, lam) > 1e-3
        ends = max(ends, non_decomposition_witness(Zc, Zu, W, 0.0),
                   non_decomposition_witness(Zc, Zu, W, 1.0))
    ok = abs(worked - 0.0476) <= 1e-3 and hits >= 99 and ends <= 1e-12
    return CheckResult("mixed-state prediction is not the lambda blend of predictions", ok,
                       f"worked example {worked:.4f}, {hits}/100 random, endpoints {ends:.1e}")


def check_causality(n: int = 20, seed: int = 0) -> CheckResult:
    """Gradient of logits at position n w.r.t. input embeddings at m > n is exactly 0."""
    params = tiny_model(seed)
    rng = np.random.default_rng(seed)
    leaked = 0.0
    for _ in range(n):
        L = int(rng.integers(3, 12))
        tokens = rng.integers(0, params.config.vocab_size, size=(1, L))
        x = Tensor(embed(params, tokens).data, requires_grad=True)
        logits = forward_embeddings(params, x, np.ones((1, L), dtype=bool)).logits
        pos = int(rng.integers(0, L - 1))
        probe = rng.normal(size=params.config.vocab_size)
        (g,) = backward((logits[0, pos] * Tensor(probe)).sum(), [x])
        leaked = max(leaked, float(np.max(np.abs(g[0, pos + 1 :]))))
    return CheckResult("no gradient flows from future tokens to past logits", leaked == 0.0,
                       f"{n} sequences, max leak {leaked:.1e}")


SUITES: dict[str, Callable[[], CheckResult]] = {
    "softmax": check_softmax,
    "gradient": check_head_gradient,
    "model-gradient": check_model_gradient,
    "beta": check_beta,
    "endpoints": check_endpoints,
    "non-decomposition": check_non_decomposition,
    "causality": check_causality,
}


def run_checks(names: list[str] | None = None) -> list[CheckResult]:
    return [SUITES[n]() for n in (names or list(SUITES))]
