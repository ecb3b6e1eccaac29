"""Micro decoder-only transformer that exposes last-layer hidden states.

Pre-norm blocks (causal multi-head attention, GELU MLP), learned positional
embeddings, a final layer norm, and a bias-free head ``W`` so that
``logits = hidden @ W`` holds exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, InvalidInputError, ShapeError
from .numeric.autograd import (
    Tensor,
    embedding,
    gelu,
    layer_norm,
    matmul,
    softmax,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    init_seed: int = 0
    # Wider than the usual 0.02: at this size it shortens the plateau before
    # attention locks onto the copy offset from hundreds of steps to tens.
    init_std: float = 0.1

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


@dataclass
class Parameters:
    """Named float64 arrays in a stable insertion order."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def W(self) -> np.ndarray:
        return self.arrays["lm_head"]


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = config.d_model, config.d_ff
    shapes = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_seq_len, d)),
    ]
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)),
            (p + "attn.wo", (d, d)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
            (p + "mlp.w1", (d, f)),
            (p + "mlp.b1", (f,)),
            (p + "mlp.w2", (f, d)),
            (p + "mlp.b2", (d,)),
        ]
    shapes += [("ln_f.gamma", (d,)), ("ln_f.beta", (d,)), ("lm_head", (d, config.vocab_size))]
    return shapes


def init(config: ModelConfig) -> Parameters:
    """Normal(0, init_std) weights; residual projections scaled by 1/sqrt(2 L)."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.init_seed))
    resid_std = config.init_std / np.sqrt(2 * config.n_layers)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        if name.endswith(".gamma"):
            arrays[name] = np.ones(shape)
        elif name.endswith((".beta", ".b1", ".b2")):
            arrays[name] = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w2")):
            arrays[name] = rng.standard_normal(shape) * resid_std
        else:
            arrays[name] = rng.standard_normal(shape) * config.init_std
    return Parameters(config, arrays)


@dataclass
class ForwardOutput:
    hidden: Tensor
    logits: Tensor


def as_graph(params: Parameters, requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap every parameter array as a graph leaf."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


class GraphLeaves(dict):
    """Parameter leaves plus the model config forward needs."""

    config: ModelConfig


def graph_leaves(params: Parameters, requires_grad: bool = False) -> GraphLeaves:
    leaves = GraphLeaves(as_graph(params, requires_grad))
    leaves.config = params.config
    return leaves


def _leaves(params: "Parameters | GraphLeaves") -> GraphLeaves:
    return graph_leaves(params) if isinstance(params, Parameters) else params


def lm_head(params: "Parameters | GraphLeaves", hidden) -> Tensor:
    """Bias-free linear head: ``hidden @ W``."""
    leaves = _leaves(params)
    W = leaves["lm_head"]
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if hidden.shape[-1] != W.shape[0]:
        raise ShapeError(f"hidden last axis {hidden.shape[-1]} != d_model {W.shape[0]}")
    if hidden.ndim == 1:
        return matmul(hidden.reshape(1, -1), W).reshape(W.shape[1])
    return matmul(hidden, W)


def attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """[B, 1, L, L] boolean: query n may see key m iff m <= n and m is real."""
    L = pad_mask.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    mask = causal[None, :, :] & pad_mask[:, None, :]
    # Padding queries keep their own slot so no row is fully masked.
    mask |= np.eye(L, dtype=bool)[None]
    return mask[:, None, :, :]


def embed(params: "Parameters | GraphLeaves", tokens: np.ndarray) -> Tensor:
    leaves = _leaves(params)
    tokens = np.asarray(tokens)
    L = tokens.shape[1]
    pos = leaves["pos_emb"][:L]
    return embedding(leaves["tok_emb"], tokens) + pos


def forward_embeddings(
    params: "Parameters | GraphLeaves",
    x: Tensor,
    pad_mask: np.ndarray,
) -> ForwardOutput:
    """Run the transformer stack on input embeddings ``x`` [B, L, d]."""
    leaves = _leaves(params)
    cfg_d = leaves["tok_emb"].shape[1]
    n_layers = leaves.config.n_layers
    n_heads = leaves.config.n_heads
    B, L, d = x.shape
    if d != cfg_d:
        raise ShapeError(f"embedding width {d} != d_model {cfg_d}")
    hd = d // n_heads
    mask = attention_mask(np.asarray(pad_mask, dtype=bool))
    scale = 1.0 / np.sqrt(hd)
    for i in range(n_layers):
        p = f"blocks.{i}."
        h = layer_norm(x, leaves[p + "ln1.gamma"], leaves[p + "ln1.beta"])
        q = matmul(h, leaves[p + "attn.wq"]).reshape(B, L, n_heads, hd).transpose(0, 2, 1, 3)
        k = matmul(h, leaves[p + "attn.wk"]).reshape(B, L, n_heads, hd).transpose(0, 2, 3, 1)
        v = matmul(h, leaves[p + "attn.wv"]).reshape(B, L, n_heads, hd).transpose(0, 2, 1, 3)
        att = softmax(matmul(q, k) * scale, mask)
        ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        x = x + matmul(ctx, leaves[p + "attn.wo"])
        h = layer_norm(x, leaves[p + "ln2.gamma"], leaves[p + "ln2.beta"])
        h = gelu(matmul(h, leaves[p + "mlp.w1"]) + leaves[p + "mlp.b1"])
        x = x + matmul(h, leaves[p + "mlp.w2"]) + leaves[p + "mlp.b2"]
    hidden = layer_norm(x, leaves["ln_f.gamma"], leaves["ln_f.beta"])
    return ForwardOutput(hidden=hidden, logits=lm_head(leaves, hidden))


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be [batch, seq_len], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InvalidInputError(
            f"token ids must lie in [0, {config.vocab_size}), got range "
            f"[{tokens.min()}, {tokens.max()}]"
        )
    if tokens.shape[1] > config.max_seq_len:
        raise InvalidInputError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    return tokens


def forward(
    params: Parameters | GraphLeaves,
    tokens: np.ndarray,
    pad_mask: np.ndarray | None = None,
) -> ForwardOutput:
    """Hidden states and logits for a [B, L] batch of token ids.

    ``params`` may be plain :class:`Parameters` (constant graph) or leaves from
    :func:`graph_leaves` when gradients are wanted.
    """
    leaves = _leaves(params)
    tokens = _check_tokens(leaves.config, tokens)
    if pad_mask is None:
        pad_mask = np.ones(tokens.shape, dtype=bool)
    x = embed(leaves, tokens)
    return forward_embeddings(leaves, x, pad_mask)
