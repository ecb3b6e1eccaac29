import json
import math

import numpy as np
import pytest

from sftmix_lab.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from sftmix_lab.corpus import CorpusSpec, generate_corpus
from sftmix_lab.dynamics import ConfidenceSplit
from sftmix_lab.errors import ConfigError, ContractError, DataError, FormatError, IntegrityError, ShapeError
from sftmix_lab.evalreport import decomposition_residual
from sftmix_lab.model import ModelConfig, init
from sftmix_lab.optim import AdamState, adamw_step, clip_by_global_norm, lr_at, warmup_steps
from sftmix_lab.trainer import (
    Recipe,
    TrainConfig,
    checkpoint_steps,
    list_checkpoints,
    read_config,
    read_metrics,
    train,
)

MODEL = ModelConfig(d_model=16, n_heads=2, d_ff=32, max_seq_len=32)


def cfg(**kw) -> TrainConfig:
    base = dict(epochs=2, batch_size=8, model=MODEL, checkpoint_count=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_corpus(CorpusSpec(num_examples=64, seed=11, max_len=8))


@pytest.fixture(scope="module")
def halves(data):
    ids = [ex.id for ex in data]
    return ConfidenceSplit(tuple(ids[::2]), tuple(ids[1::2]))


# -- optimizer ---------------------------------------------------------------------


def test_adamw_pure_decay_example():
    p = {"w": np.array([1.0])}
    new, _ = adamw_step(p, {"w": np.zeros(1)}, AdamState.zeros_like(p), 1, lr=0.1, weight_decay=0.1)
    assert new["w"][0] == pytest.approx(0.99, abs=1e-15)


def test_adamw_unit_step_with_constant_gradient():
    p = {"w": np.array([0.0, 0.0])}
    g = {"w": np.array([3.0, -0.5])}
    state = AdamState.zeros_like(p)
    for step in range(1, 200):
        before = p["w"].copy()
        p, state = adamw_step(p, g, state, step, lr=0.01)
    np.testing.assert_allclose(before - p["w"], [0.01, -0.01], rtol=1e-6)


def test_adamw_deterministic_and_shape_checked():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 2))}
    g = {"a": rng.normal(size=(3, 2))}
    a, _ = adamw_step(p, g, AdamState.zeros_like(p), 1, 1e-3, 0.1)
    b, _ = adamw_step(p, g, AdamState.zeros_like(p), 1, 1e-3, 0.1)
    assert np.array_equal(a["a"], b["a"])
    with pytest.raises(ShapeError):
        adamw_step(p, {"a": np.zeros(2)}, AdamState.zeros_like(p), 1, 1e-3)
    with pytest.raises(ContractError):
        adamw_step(p, g, AdamState.zeros_like(p), 0, 1e-3)


def test_lr_schedule_landmarks():
    T, peak = 100, 3e-4
    w = warmup_steps(T, 0.1)
    assert w == 10
    assert lr_at(0, T, peak, 0.1) == 0.0
    assert lr_at(w, T, peak, 0.1) == peak
    assert lr_at(T, T, peak, 0.1) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(5, T, peak, 0.1) == pytest.approx(peak / 2)
    assert lr_at(55, T, peak, 0.1) == pytest.approx(peak / 2)
    with pytest.raises(ContractError):
        lr_at(T + 1, T, peak, 0.1)
    with pytest.raises(ContractError):
        lr_at(-1, T, peak, 0.1)


def test_warmup_rounds_up():
    assert warmup_steps(192, 0.1) == math.ceil(19.2)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_by_global_norm(g, 1.0)
    assert math.hypot(out["a"][0], out["b"][0]) == pytest.approx(1.0)
    assert clip_by_global_norm(g, 10.0) is g


# -- config / recipes -----------------------------------------------------------


def test_default_train_config():
    c = TrainConfig()
    assert (c.batch_size, c.epochs, c.weight_decay, c.warmup_ratio, c.checkpoint_count) == (
        32, 3, 0.1, 0.1, 5
    )
    assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)
    assert c.grad_clip is None and c.reduction == "mean"


def test_config_round_trip():
    c = cfg(recipe="sftmix", mu=0.5)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


@pytest.mark.parametrize(
    "kw", [{"mu": -1.0}, {"alpha": 0.0}, {"warmup_ratio": 1.0}, {"recipe": "bogus"},
           {"recipe": "sftmix", "batch_size": 7}, {"reduction": "max"}],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        cfg(**kw).validate()


def test_recipe_matrix():
    assert Recipe.NTP_PLUS_MIXUP_LOSS.effective_mu(0.2) == 1.0
    assert Recipe.MIXUP_ONLY.effective_mu(0.2) == 1.0
    assert Recipe.SFTMIX.effective_mu(0.2) == 0.2
    assert Recipe.NTP.effective_mu(0.2) == 0.0
    assert Recipe.NTP_CONF_HALF.effective_mu(0.2) == 0.0
    assert len(Recipe) == 8


def test_checkpoint_steps_even_and_final():
    assert checkpoint_steps(192, 5) == [38, 77, 115, 154, 192]
    assert checkpoint_steps(10, 10) == list(range(1, 11))
    with pytest.raises(ConfigError):
        checkpoint_steps(3, 5)


# -- training ------------------------------------------------------------------------


def test_ntp_loss_decreases(data):
    res = train(cfg(epochs=4, learning_rate=3e-3), data)
    first = np.mean([m["loss_total"] for m in res.metrics[:4]])
    last = np.mean([m["loss_total"] for m in res.metrics[-4:]])
    assert last < first


def test_run_directory_layout(data, tmp_path):
    res = train(cfg(), data, out_dir=tmp_path)
    assert [p.name for p in list_checkpoints(tmp_path)] == [f"ckpt_{k}.bin" for k in range(1, 5)]
    assert read_config(tmp_path) == cfg()
    metrics = read_metrics(tmp_path)
    assert metrics == json.loads(json.dumps(res.metrics))
    assert {"step", "lr", "loss_ntp", "loss_mixup", "loss_total"} <= set(metrics[0])
    steps = [load_checkpoint(p).step for p in list_checkpoints(tmp_path)]
    assert steps == res.checkpoint_steps and steps[-1] == len(metrics)
    assert json.loads((tmp_path / "dataset.json").read_text())["count"] == len(data)


def test_mixup_recipes_need_split(data):
    for r in Recipe:
        if r.needs_split:
            with pytest.raises(ConfigError):
                train(cfg(recipe=r.value), data)


def test_split_must_match_dataset(data, halves):
    bad = ConfidenceSplit(halves.confident_ids[:-1] + ("nope",), halves.unconfident_ids)
    with pytest.raises(DataError):
        train(cfg(recipe="sftmix"), data, split=bad)


def test_mu_zero_matches_ntp_bitwise(data, halves):
    a = train(cfg(recipe="sftmix", mu=0.0), data, split=halves)
    b = train(cfg(recipe="ntp"), data, split=halves)
    assert a.metrics == b.metrics
    for name in a.params.names():
        assert np.array_equal(a.params[name], b.params[name])


def test_mixup_batches_are_balanced(data, halves):
    res = train(cfg(recipe="sftmix"), data, split=halves)
    assert all(m["batch_size"] == 8 for m in res.metrics)
    assert all(m["lambda_mean"] is not None for m in res.metrics)


def test_half_recipes_halve_steps(data, halves):
    full = train(cfg(recipe="ntp"), data)
    conf = train(cfg(recipe="ntp-conf-half"), data, split=halves)
    unconf = train(cfg(recipe="ntp-unconf-half"), data, split=halves)
    assert len(conf.metrics) == len(unconf.metrics) == len(full.metrics) // 2


@pytest.mark.parametrize("recipe", [r.value for r in Recipe])
def test_loss_decomposition_every_recipe(data, halves, recipe):
    res = train(cfg(recipe=recipe, epochs=1), data, split=None if recipe == "ntp" else halves)
    assert decomposition_residual(res.metrics) <= 1e-12
    if recipe == "mixup-only":
        assert all(m["loss_ntp"] is None for m in res.metrics)


def test_ntp_plus_mixup_uses_unit_weight(data, halves):
    res = train(cfg(recipe="ntp-plus-mixup-loss", epochs=1), data, split=halves)
    m = res.metrics[0]
    assert m["mu"] == 1.0
    assert m["loss_total"] == m["loss_ntp"] + m["loss_mixup"]


def test_repeated_runs_bitwise_identical(data, halves, tmp_path):
    train(cfg(recipe="sftmix"), data, split=halves, out_dir=tmp_path / "a")
    train(cfg(recipe="sftmix"), data, split=halves, out_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    for pa, pb in zip(list_checkpoints(tmp_path / "a"), list_checkpoints(tmp_path / "b")):
        assert pa.read_bytes() == pb.read_bytes()


def test_resume_matches_uninterrupted(data, halves, tmp_path):
    c = cfg(recipe="sftmix", epochs=2)
    train(c, data, split=halves, out_dir=tmp_path / "full")
    train(c, data, split=halves, out_dir=tmp_path / "part", max_steps=5)
    first = list_checkpoints(tmp_path / "part")[0]
    ckpt = load_checkpoint(first, MODEL)
    assert ckpt.step == 4
    train(c, data, split=halves, out_dir=tmp_path / "part", resume=ckpt)
    assert (tmp_path / "full/metrics.jsonl").read_bytes() == (
        tmp_path / "part/metrics.jsonl"
    ).read_bytes()
    for pa, pb in zip(list_checkpoints(tmp_path / "full"), list_checkpoints(tmp_path / "part")):
        assert pa.read_bytes() == pb.read_bytes()


# -- checkpoint format -------------------------------------------------------------


def make_ckpt() -> Checkpoint:
    p = init(MODEL)
    rng = np.random.default_rng(0)
    m = AdamState({k: rng.normal(size=v.shape) for k, v in p.items()},
                  {k: rng.uniform(size=v.shape) for k, v in p.items()})
    from sftmix_lab.numeric.rng import SeededRng

    return Checkpoint(p, m, 17, SeededRng([0, 101]).get_state(), {"index": 1})


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    ck = make_ckpt()
    save_checkpoint(tmp_path / "a.bin", ck)
    back = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(tmp_path / "b.bin", back)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert back.step == 17 and back.rng_state == ck.rng_state
    for name in ck.params.names():
        assert np.array_equal(back.params[name], ck.params[name])
        assert np.array_equal(back.moments.v[name], ck.moments.v[name])


def test_checkpoint_header_layout():
    blob = encode(make_ckpt())
    assert blob.startswith(MAGIC)
    assert int.from_bytes(blob[8:12], "little") == FORMAT_VERSION


def test_checkpoint_checksum_flip():
    blob = bytearray(encode(make_ckpt()))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(IntegrityError):
        decode(bytes(blob))


def test_checkpoint_truncated():
    with pytest.raises(IntegrityError):
        decode(encode(make_ckpt())[:-100])


def test_checkpoint_bad_magic_and_version():
    blob = encode(make_ckpt())
    with pytest.raises(FormatError):
        decode(b"NOTACKPT" + blob[8:])
    import hashlib

    body = bytearray(blob[:-32])
    body[8:12] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(FormatError):
        decode(bytes(body) + hashlib.sha256(bytes(body)).digest())


def test_checkpoint_wrong_config():
    with pytest.raises(ConfigError):
        decode(encode(make_ckpt()), ModelConfig(d_model=32, n_heads=2, d_ff=32, max_seq_len=32))


def test_resume_with_wrong_model_config(data):
    ck = make_ckpt()
    with pytest.raises(ConfigError):
        train(cfg(model=ModelConfig(d_model=8, n_heads=2, d_ff=16, max_seq_len=32)), data, resume=ck)
