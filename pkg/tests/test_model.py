import numpy as np
import pytest

from sftmix_lab.corpus import CorpusSpec, collate, generate_corpus
from sftmix_lab.errors import ConfigError, InvalidInputError, ShapeError
from sftmix_lab.mixup import ntp_loss, ntp_term
from sftmix_lab.model import (
    ModelConfig,
    Parameters,
    embed,
    forward,
    forward_embeddings,
    graph_leaves,
    init,
    lm_head,
)
from sftmix_lab.numeric.autograd import Tensor, backward
from sftmix_lab.numeric.primitives import finite_diff_grad, max_relative_error


def small(**kw) -> ModelConfig:
    base = dict(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=24)
    base.update(kw)
    return ModelConfig(**base)


def test_init_is_deterministic():
    a, b = init(small()), init(small())
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name], b[name])


def test_init_seed_changes_weights():
    assert not np.array_equal(init(small())["tok_emb"], init(small(init_seed=1))["tok_emb"])


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        init(small(n_heads=3))


def test_non_positive_sizes_rejected():
    with pytest.raises(ConfigError):
        small(d_ff=0).validate()


def test_embedding_table_shape():
    p = init(small())
    assert p["tok_emb"].shape == (16, 8)
    assert p.W.shape == (8, 16)


def test_residual_projection_scaled():
    cfg = ModelConfig(n_layers=2, d_model=64, d_ff=256, init_std=0.1)
    p = init(cfg)
    assert np.std(p["blocks.0.attn.wo"]) == pytest.approx(0.05, rel=0.05)
    assert np.std(p["blocks.0.attn.wq"]) == pytest.approx(0.1, rel=0.05)


def test_default_config_values():
    cfg = ModelConfig()
    assert (cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq_len) == (
        64, 64, 2, 4, 256, 128
    )


def test_config_round_trip():
    cfg = small(init_seed=5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes_and_head():
    p = init(small())
    tokens = np.array([[1, 4, 5, 2, 6, 3]])
    out = forward(p, tokens)
    assert out.hidden.shape == (1, 6, 8)
    assert out.logits.shape == (1, 6, 16)
    np.testing.assert_allclose(out.logits.data, out.hidden.data @ p.W, atol=1e-12, rtol=0)


def test_lm_head_shares_forward_code_path():
    p = init(small())
    out = forward(p, np.array([[1, 7, 8, 2]]))
    assert np.array_equal(lm_head(p, out.hidden).data, out.logits.data)


def test_lm_head_basis_vector_selects_row():
    p = init(small())
    e = np.zeros(8)
    e[3] = 1.0
    np.testing.assert_array_equal(lm_head(p, e).data, p.W[3])


def test_lm_head_zero_hidden_gives_zero_logits():
    p = init(small())
    assert np.all(lm_head(p, np.zeros((2, 8))).data == 0.0)


def test_lm_head_shape_error():
    with pytest.raises(ShapeError):
        lm_head(init(small()), np.zeros(5))


def test_out_of_range_token_rejected():
    with pytest.raises(InvalidInputError):
        forward(init(small()), np.array([[1, 16]]))


def test_too_long_sequence_rejected():
    with pytest.raises(InvalidInputError):
        forward(init(small(max_seq_len=4)), np.ones((1, 5), dtype=int))


def test_perturbing_token_changes_only_later_logits():
    p = init(small(init_std=0.3))
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 16, size=(1, 10))
    base = forward(p, tokens).logits.data
    for j in range(10):
        moved = tokens.copy()
        moved[0, j] = (moved[0, j] + 1) % 16
        out = forward(p, moved).logits.data
        assert np.array_equal(out[0, :j], base[0, :j])
        assert not np.allclose(out[0, j:], base[0, j:])


@pytest.mark.parametrize("seed", range(5))
def test_causality_by_autodiff(seed):
    p = init(small(init_std=0.3, init_seed=seed))
    rng = np.random.default_rng(seed)
    L = 9
    tokens = rng.integers(0, 16, size=(1, L))
    for n in range(L):
        x = Tensor(embed(p, tokens).data, requires_grad=True)
        logits = forward_embeddings(p, x, np.ones((1, L), dtype=bool)).logits
        (g,) = backward((logits[0, n] * Tensor(rng.normal(size=16))).sum(), [x])
        assert np.all(g[0, n + 1 :] == 0.0)
        assert np.any(g[0, : n + 1] != 0.0)


def test_padding_equivalence():
    p = init(small(init_std=0.3))
    rng = np.random.default_rng(1)
    short = rng.integers(4, 16, size=5)
    long_ = rng.integers(4, 16, size=9)
    alone = forward(p, short[None]).logits.data[0]
    tokens = np.zeros((2, 9), dtype=int)
    tokens[0, :5] = short
    tokens[1] = long_
    pad = np.zeros((2, 9), dtype=bool)
    pad[0, :5] = True
    pad[1] = True
    batched = forward(p, tokens, pad).logits.data
    np.testing.assert_allclose(batched[0, :5], alone, atol=1e-10, rtol=0)
    np.testing.assert_allclose(batched[1], forward(p, long_[None]).logits.data[0], atol=1e-10, rtol=0)


def test_forward_is_deterministic():
    p = init(small())
    t = np.array([[1, 5, 6, 7, 2]])
    assert np.array_equal(forward(p, t).logits.data, forward(p, t).logits.data)


def test_full_model_gradient_matches_finite_differences():
    cfg = small(vocab_size=64, max_seq_len=40, init_std=0.3)
    p = init(cfg)
    examples = generate_corpus(CorpusSpec(num_examples=4, seed=5, max_len=6, min_len=2))
    batch = collate(examples, cfg.max_seq_len)
    leaves = graph_leaves(p, requires_grad=True)
    backward(ntp_term(forward(leaves, batch.tokens, batch.pad_mask).logits, batch))
    for name in p.names():

        def f(arr, name=name):
            moved = Parameters(cfg, dict(p.arrays))
            moved.arrays[name] = arr
            return ntp_loss(moved, examples)

        fd = finite_diff_grad(f, p[name])
        assert max_relative_error(leaves[name].grad, fd) < 1e-4, name
