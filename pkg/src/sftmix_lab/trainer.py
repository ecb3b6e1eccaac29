"""Training loop for NTP, SFTMix and the ablation recipes.

Recipes differ in which rows feed the NTP term and whether the Mixup term is
part of the objective:

=========================  ============  ===================
recipe                     NTP rows      objective
=========================  ============  ===================
ntp                        all           NTP
sftmix                     all           NTP + mu * Mixup
mixup-only                 none          Mixup
ntp-plus-mixup-loss        all           NTP + Mixup
ntp-conf-half              confident     NTP
ntp-unconf-half            unconfident   NTP
ntp-conf-half-mixup        confident     NTP + mu * Mixup
ntp-unconf-half-mixup      unconfident   NTP + mu * Mixup
=========================  ============  ===================

Whenever a split is supplied, full-data recipes draw paired batches (B/2
confident rows followed by their B/2 unconfident partners). The plain NTP
recipe then still logs the Mixup value as a diagnostic with ``mu = 0``, so its
metrics stream is comparable to ``sftmix`` at ``mu = 0``.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import InstructionExample, collate, dataset_hash, index_by_id
from .dynamics import ConfidenceSplit, check_split_covers
from .errors import ConfigError, DataError
from .mixup import MixupBatch, mixup_term, ntp_term, pair_epoch, sample_lambda, sftmix_loss
from .model import ModelConfig, Parameters, forward, graph_leaves, init
from .numeric.autograd import backward
from .numeric.rng import SeededRng
from .optim import AdamState, adamw_step, clip_by_global_norm, lr_at

log = logging.getLogger(__name__)


class Recipe(str, enum.Enum):
    NTP = "ntp"
    SFTMIX = "sftmix"
    MIXUP_ONLY = "mixup-only"
    NTP_PLUS_MIXUP_LOSS = "ntp-plus-mixup-loss"
    NTP_CONF_HALF = "ntp-conf-half"
    NTP_UNCONF_HALF = "ntp-unconf-half"
    NTP_CONF_HALF_MIXUP = "ntp-conf-half-mixup"
    NTP_UNCONF_HALF_MIXUP = "ntp-unconf-half-mixup"

    @classmethod
    def parse(cls, name: str) -> "Recipe":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(r.value for r in cls)
            raise ConfigError(f"unknown recipe {name!r} (choose from {valid})") from None

    @property
    def ntp_rows(self) -> str | None:
        return {
            Recipe.MIXUP_ONLY: None,
            Recipe.NTP_CONF_HALF: "confident",
            Recipe.NTP_UNCONF_HALF: "unconfident",
            Recipe.NTP_CONF_HALF_MIXUP: "confident",
            Recipe.NTP_UNCONF_HALF_MIXUP: "unconfident",
        }.get(self, "all")

    @property
    def mixup_in_objective(self) -> bool:
        return self in (
            Recipe.SFTMIX,
            Recipe.MIXUP_ONLY,
            Recipe.NTP_PLUS_MIXUP_LOSS,
            Recipe.NTP_CONF_HALF_MIXUP,
            Recipe.NTP_UNCONF_HALF_MIXUP,
        )

    @property
    def half_only(self) -> bool:
        """NTP on one half with no Mixup: batches come from that half alone."""
        return self in (Recipe.NTP_CONF_HALF, Recipe.NTP_UNCONF_HALF)

    @property
    def needs_split(self) -> bool:
        return self is not Recipe.NTP

    def effective_mu(self, mu: float) -> float:
        if self in (Recipe.MIXUP_ONLY, Recipe.NTP_PLUS_MIXUP_LOSS):
            return 1.0
        return mu if self.mixup_in_objective else 0.0


@dataclass
class TrainConfig:
    recipe: str = "ntp"
    alpha: float = 0.5
    mu: float = 0.2
    learning_rate: float = 3e-3
    weight_decay: float = 0.1
    warmup_ratio: float = 0.1
    epochs: int = 3
    batch_size: int = 32
    checkpoint_count: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    reduction: str = "mean"
    model: ModelConfig = field(default_factory=ModelConfig)
    data_path: str | None = None
    split_path: str | None = None
    out_dir: str | None = None

    def validate(self) -> "TrainConfig":
        recipe = Recipe.parse(self.recipe)
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_count < 1:
            raise ConfigError("epochs, batch_size and checkpoint_count must be >= 1")
        if recipe is not Recipe.NTP and not recipe.half_only and self.batch_size % 2:
            raise ConfigError(f"recipe {recipe.value} needs an even batch size")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)


@dataclass
class RunResult:
    params: Parameters
    metrics: list[dict]
    checkpoint_steps: list[int]
    out_dir: Path | None


def checkpoint_steps(total_steps: int, count: int) -> list[int]:
    """``count`` evenly spaced steps in ``[1, total_steps]`` ending at the final step."""
    if count > total_steps:
        raise ConfigError(f"cannot save {count} checkpoints in {total_steps} steps")
    return [max(1, round(k * total_steps / count)) for k in range(1, count + 1)]


@dataclass
class _Plan:
    """Deterministic batch schedule; rebuilt identically on resume."""

    examples: dict[str, InstructionExample]
    recipe: Recipe
    batch_size: int
    seed: int
    split: ConfidenceSplit | None
    ids: list[str]

    def epoch(self, e: int) -> list[MixupBatch | list[str]]:
        rng = SeededRng([self.seed, 202, e])
        if self.split is not None and not self.recipe.half_only:
            return pair_epoch(self.split, self.batch_size, rng)
        if self.recipe is Recipe.NTP_CONF_HALF:
            pool = list(self.split.confident_ids)
        elif self.recipe is Recipe.NTP_UNCONF_HALF:
            pool = list(self.split.unconfident_ids)
        else:
            pool = list(self.ids)
        perm = rng.permutation(len(pool))
        pool = [pool[i] for i in perm]
        return [pool[i : i + self.batch_size] for i in range(0, len(pool), self.batch_size)]

    def steps_per_epoch(self) -> int:
        if self.split is not None and not self.recipe.half_only:
            half = self.batch_size // 2
            return math.ceil(len(self.split.confident_ids) / half)
        if self.recipe.half_only:
            return math.ceil(len(self.split.confident_ids) / self.batch_size)
        return math.ceil(len(self.ids) / self.batch_size)


def _step_loss(leaves, cfg: TrainConfig, recipe: Recipe, plan_batch, examples, lam_rng):
    """Build the objective graph for one batch; return (total, record fields)."""
    if isinstance(plan_batch, MixupBatch):
        ids = plan_batch.ids
        k = len(plan_batch)
        conf_rows, unconf_rows = list(range(k)), list(range(k, 2 * k))
        plan_batch.lambdas = sample_lambda(cfg.alpha, lam_rng, k)
    else:
        ids = plan_batch
        conf_rows = unconf_rows = None
    batch = collate([examples[i] for i in ids], cfg.model.max_seq_len)
    out = forward(leaves, batch.tokens, batch.pad_mask)

    scope = recipe.ntp_rows
    ntp = None
    if scope is not None:
        rows = {"all": None, "confident": conf_rows, "unconfident": unconf_rows}[scope]
        if recipe.half_only:
            rows = None
        ntp = ntp_term(out.logits, batch, rows, cfg.reduction)

    mix = None
    lam = None
    if conf_rows is not None:
        lam = plan_batch.lambdas
        mix = mixup_term(
            out.hidden, leaves["lm_head"], batch, conf_rows, unconf_rows, lam, cfg.reduction
        )

    mu = recipe.effective_mu(cfg.mu)
    if recipe is Recipe.MIXUP_ONLY:
        total = mix
    elif recipe.mixup_in_objective:
        total = sftmix_loss(ntp, mix, mu)
    else:
        total = ntp
    record = {
        "loss_ntp": None if ntp is None else ntp.item(),
        "loss_mixup": None if mix is None else mix.item(),
        "loss_total": total.item(),
        "mu": mu,
        "lambda_mean": None if lam is None else float(np.mean(lam)),
        "lambda_min": None if lam is None else float(np.min(lam)),
        "lambda_max": None if lam is None else float(np.max(lam)),
        "batch_size": len(ids),
    }
    return total, record


def train(
    cfg: TrainConfig,
    dataset: Sequence[InstructionExample],
    split: ConfidenceSplit | None = None,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> RunResult:
    """Run one recipe; writes config.json, metrics.jsonl and checkpoints/ if ``out_dir``.

    ``max_steps`` stops early (the schedule still spans the full run), which
    together with ``resume`` lets interrupted training be continued exactly.
    """
    cfg.validate()
    recipe = Recipe.parse(cfg.recipe)
    if recipe.needs_split and split is None:
        raise ConfigError(f"recipe {recipe.value} requires a confidence split")
    ids = [ex.id for ex in dataset]
    if split is not None:
        check_split_covers(split, dataset)
    longest = max(len(ex.instruction) + len(ex.response) + 3 for ex in dataset)
    if longest > cfg.model.max_seq_len:
        raise ConfigError(f"max_seq_len {cfg.model.max_seq_len} < longest example {longest}")

    examples = index_by_id(dataset)
    plan = _Plan(examples, recipe, cfg.batch_size, cfg.seed, split, ids)
    per_epoch = plan.steps_per_epoch()
    total_steps = per_epoch * cfg.epochs
    ckpt_steps = checkpoint_steps(total_steps, cfg.checkpoint_count)

    lam_rng = SeededRng([cfg.seed, 101])
    if resume is not None:
        if resume.params.config != cfg.model:
            raise ConfigError("checkpoint model config differs from the run config")
        params = resume.params.copy()
        moments = resume.moments
        start = resume.step
        if resume.rng_state is not None:
            lam_rng.set_state(resume.rng_state)
    else:
        params = init(cfg.model)
        moments = AdamState.zeros_like(params.arrays)
        start = 0

    out_path = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    if out_path is not None:
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)
        if resume is None:
            for stale in (out_path / "checkpoints").glob("ckpt_*.bin"):
                stale.unlink()
        resolved = cfg.to_dict()
        (out_path / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        (out_path / "dataset.json").write_text(
            json.dumps({"count": len(dataset), "sha256": dataset_hash(dataset)}, indent=2) + "\n"
        )
        metrics_file = out_path / "metrics.jsonl"
        if resume is not None and metrics_file.exists():
            with open(metrics_file) as fh:
                metrics = [json.loads(l) for l in fh if l.strip()]
            metrics = [m for m in metrics if m["step"] <= start]

    stop = total_steps if max_steps is None else min(total_steps, max_steps)
    step = start
    epoch_cache: tuple[int, list] | None = None
    while step < stop:
        e, j = divmod(step, per_epoch)
        if epoch_cache is None or epoch_cache[0] != e:
            epoch_cache = (e, plan.epoch(e))
        plan_batch = epoch_cache[1][j]

        leaves = graph_leaves(params, requires_grad=True)
        total, record = _step_loss(leaves, cfg, recipe, plan_batch, examples, lam_rng)
        backward(total)
        grads = {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in leaves.items()
        }
        if cfg.grad_clip is not None:
            grads = clip_by_global_norm(grads, cfg.grad_clip)
        lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_ratio)
        new_arrays, moments = adamw_step(
            params.arrays, grads, moments, step + 1, lr,
            cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps,
        )
        params = Parameters(cfg.model, new_arrays)
        step += 1
        metrics.append({"step": step, "epoch": e, "lr": lr, **record})

        if step in ckpt_steps and out_path is not None:
            k = ckpt_steps.index(step) + 1
            save_checkpoint(
                out_path / "checkpoints" / f"ckpt_{k}.bin",
                Checkpoint(params, moments, step, lam_rng.get_state(), {"recipe": recipe.value, "index": k}),
            )
        if step % 50 == 0:
            log.info("step %d/%d loss %.4f", step, total_steps, record["loss_total"])

    if out_path is not None:
        with open(out_path / "metrics.jsonl", "w", newline="\n") as fh:
            for m in metrics:
                fh.write(json.dumps(m) + "\n")
    return RunResult(params, metrics, ckpt_steps, out_path)


def list_checkpoints(run_dir: str | Path) -> list[Path]:
    """Checkpoint files of a run ordered by index."""
    files = sorted(
        Path(run_dir, "checkpoints").glob("ckpt_*.bin"),
        key=lambda p: int(p.stem.split("_")[1]),
    )
    if not files:
        raise DataError(f"no checkpoints under {run_dir}")
    return files


def load_run_params(run_dir: str | Path) -> list[Parameters]:
    return [load_checkpoint(p).params for p in list_checkpoints(run_dir)]


def final_params(run_dir: str | Path) -> Parameters:
    return load_checkpoint(list_checkpoints(run_dir)[-1]).params


def read_metrics(run_dir: str | Path) -> list[dict]:
    with open(Path(run_dir) / "metrics.jsonl") as fh:
        return [json.loads(l) for l in fh if l.strip()]


def read_config(run_dir: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads((Path(run_dir) / "config.json").read_text()))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
