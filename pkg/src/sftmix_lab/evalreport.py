"""Held-out evaluation, recipe comparison tables and confidence composition."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (
    BOS,
    DETERMINISTIC_FAMILIES,
    EOS,
    FAMILIES,
    PAD,
    SEP,
    CorpusSpec,
    InstructionExample,
    dataset_hash,
)
from .dynamics import ConfidenceSplit, check_split_covers, response_nll
from .errors import ConfigError, ContractError, DataError
from .model import Parameters, forward
from .trainer import Recipe, read_config, read_metrics

HELDOUT_SIZE = 512
HELDOUT_SEED_OFFSET = 1000
DECOMPOSITION_TOL = 1e-12


def heldout_spec(train_spec: CorpusSpec | None = None, size: int = HELDOUT_SIZE) -> CorpusSpec:
    """Held-out corpus: training family mix, disjoint seed, shared substitution."""
    base = train_spec or CorpusSpec()
    return CorpusSpec(
        num_examples=size,
        family_fractions=dict(base.family_fractions),
        alphabet_size=base.alphabet_size,
        min_len=base.min_len,
        max_len=base.max_len,
        seed=base.seed + HELDOUT_SEED_OFFSET,
        map_seed=base.seed if base.map_seed is None else base.map_seed,
    )


def _family_means(examples: Sequence[InstructionExample], values: np.ndarray) -> dict[str, float]:
    groups: dict[str, list[float]] = defaultdict(list)
    for ex, v in zip(examples, values):
        groups[ex.family].append(float(v))
    return {f: float(np.mean(groups[f])) for f in FAMILIES if f in groups}


def heldout_perplexity(params: Parameters, dataset: Sequence[InstructionExample]) -> dict:
    """Mean per-example perplexity, per family and overall (example weighted)."""
    if not dataset:
        raise ContractError("held-out dataset is empty")
    perps = np.exp(response_nll(params, dataset))
    counts = Counter(ex.family for ex in dataset)
    return {
        "overall": float(np.mean(perps)),
        "per_family": _family_means(dataset, perps),
        "counts": {f: counts[f] for f in FAMILIES if f in counts},
    }


def greedy_decode(
    params: Parameters,
    examples: Sequence[InstructionExample],
    max_new_tokens: int | Sequence[int] | None = None,
    batch_size: int = 256,
) -> list[list[int]]:
    """Greedy continuation of ``[BOS, X, SEP]`` up to EOS (excluded) or the cap.

    The default cap per example is its reference length + 1: any longer
    output cannot be an exact match, so accuracy is unaffected.
    """
    if max_new_tokens is None:
        caps = [len(ex.response) + 1 for ex in examples]
    elif isinstance(max_new_tokens, int):
        caps = [max_new_tokens] * len(examples)
    else:
        caps = list(max_new_tokens)
    limit = params.config.max_seq_len
    outputs: list[list[int]] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        seqs = [[BOS, *ex.instruction_ids, SEP] for ex in chunk]
        gen: list[list[int]] = [[] for _ in chunk]
        cap = [min(c, limit - len(s)) for c, s in zip(caps[start:], seqs)]
        live = [i for i in range(len(chunk)) if cap[i] > 0]
        while live:
            width = max(len(seqs[i]) for i in live)
            tokens = np.full((len(live), width), PAD, dtype=np.int64)
            pad = np.zeros((len(live), width), dtype=bool)
            for r, i in enumerate(live):
                tokens[r, : len(seqs[i])] = seqs[i]
                pad[r, : len(seqs[i])] = True
            logits = forward(params, tokens, pad).logits.data
            still = []
            for r, i in enumerate(live):
                nxt = int(np.argmax(logits[r, len(seqs[i]) - 1]))
                if nxt == EOS:
                    continue
                seqs[i].append(nxt)
                gen[i].append(nxt)
                if len(gen[i]) < cap[i]:
                    still.append(i)
            live = still
        outputs.extend(gen)
    return outputs


def task_accuracy(
    params: Parameters,
    dataset: Sequence[InstructionExample],
    max_new_tokens: int | None = None,
) -> dict:
    """Exact-match rate of greedy decoding on the deterministic families."""
    scored = [ex for ex in dataset if ex.family in DETERMINISTIC_FAMILIES]
    if not scored:
        return {"overall": None, "per_family": {}}
    outputs = greedy_decode(params, scored, max_new_tokens)
    hits = np.array([out == ex.response_ids for ex, out in zip(scored, outputs)], dtype=float)
    return {"overall": float(hits.mean()), "per_family": _family_means(scored, hits)}


def evaluate(params: Parameters, dataset: Sequence[InstructionExample]) -> dict:
    return {
        "data_sha256": dataset_hash(dataset),
        "num_examples": len(dataset),
        "perplexity": heldout_perplexity(params, dataset),
        "accuracy": task_accuracy(params, dataset),
    }


def write_eval(result: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")


# -- recipe comparison ---------------------------------------------------------


def decomposition_residual(metrics: Sequence[dict]) -> float:
    """Largest ``|total - (ntp + mu * mixup)|`` over logged steps.

    A term that was not logged counts as 0 (no NTP part in the Mixup-only
    recipe, no Mixup part without a split).
    """
    worst = 0.0
    for m in metrics:
        parts = (m["loss_ntp"] or 0.0) + (m["loss_mixup"] or 0.0) * m["mu"]
        worst = max(worst, abs(m["loss_total"] - parts))
    return worst


def _read_eval(run_dir: Path) -> dict:
    path = run_dir / "eval.json"
    if not path.exists():
        raise DataError(f"{run_dir} has no eval.json (run the eval command first)")
    return json.loads(path.read_text())


def _train_hash(run_dir: Path) -> str | None:
    path = run_dir / "dataset.json"
    return json.loads(path.read_text())["sha256"] if path.exists() else None


def compare_recipes(run_dirs: Sequence[str | Path], names: Sequence[str] | None = None) -> dict:
    """One row per run: held-out perplexity and accuracy per family, best flagged."""
    dirs = [Path(d) for d in run_dirs]
    if not dirs:
        raise ContractError("no runs to compare")
    labels = list(names) if names is not None else [d.name for d in dirs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"run names must be unique, got {labels}")

    rows = []
    eval_hashes, train_hashes = set(), set()
    for label, d in zip(labels, dirs):
        ev = _read_eval(d)
        cfg = read_config(d)
        eval_hashes.add(ev["data_sha256"])
        train_hashes.add(_train_hash(d))
        rows.append(
            {
                "name": label,
                "run_dir": str(d),
                "recipe": Recipe.parse(cfg.recipe).value,
                "mu": Recipe.parse(cfg.recipe).effective_mu(cfg.mu),
                "seed": cfg.seed,
                "perplexity": ev["perplexity"],
                "accuracy": ev["accuracy"],
                "decomposition_residual": decomposition_residual(read_metrics(d)),
            }
        )
    if len(eval_hashes) > 1:
        raise ConfigError("runs were evaluated on different held-out sets")
    if len(train_hashes) > 1:
        raise ConfigError("runs were trained on different corpora")

    columns = _columns(rows)
    best = {}
    for col, (getter, lower_better) in columns.items():
        vals = [(getter(r), r["name"]) for r in rows if getter(r) is not None]
        if not vals:
            continue
        target = min(v for v, _ in vals) if lower_better else max(v for v, _ in vals)
        best[col] = [n for v, n in vals if v == target]
    for r in rows:
        r["consistent"] = r["decomposition_residual"] <= DECOMPOSITION_TOL
    return {"eval_sha256": eval_hashes.pop(), "rows": rows, "best": best}


def _columns(rows: Sequence[dict]) -> dict:
    cols = {"ppl.overall": (lambda r: r["perplexity"]["overall"], True)}
    fams = [f for f in FAMILIES if any(f in r["perplexity"]["per_family"] for r in rows)]
    for f in fams:
        cols[f"ppl.{f}"] = (lambda r, f=f: r["perplexity"]["per_family"].get(f), True)
    cols["acc.overall"] = (lambda r: r["accuracy"]["overall"], False)
    for f in DETERMINISTIC_FAMILIES:
        if any(f in r["accuracy"]["per_family"] for r in rows):
            cols[f"acc.{f}"] = (lambda r, f=f: r["accuracy"]["per_family"].get(f), False)
    return cols


def render_table(report: dict) -> str:
    """Aligned plain-text table; ``*`` marks the best value in each column."""
    rows = report["rows"]
    columns = _columns(rows)
    header = ["run", "recipe", "mu"] + list(columns) + ["consistent"]
    body = []
    for r in rows:
        line = [r["name"], r["recipe"], f"{r['mu']:g}"]
        for col, (getter, _) in columns.items():
            v = getter(r)
            cell = "-" if v is None else f"{v:.4f}"
            if v is not None and r["name"] in report["best"].get(col, []):
                cell += "*"
            line.append(cell)
        line.append("yes" if r["consistent"] else "NO")
        body.append(line)
    widths = [max(len(str(x[i])) for x in [header] + body) for i in range(len(header))]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(b) for b in body]
    return "\n".join(lines)


# -- confidence composition ------------------------------------------------------


def confidence_composition(split: ConfidenceSplit, dataset: Sequence[InstructionExample]) -> dict:
    """Family fractions inside each half, plus where each family ended up."""
    check_split_covers(split, dataset)
    fam = {ex.id: ex.family for ex in dataset}
    present = [f for f in FAMILIES if any(ex.family == f for ex in dataset)]
    out: dict = {"fractions": {}, "counts": {}, "share_in_confident": {}}
    for name, ids in (("confident", split.confident_ids), ("unconfident", split.unconfident_ids)):
        c = Counter(fam[i] for i in ids)
        total = len(ids)
        out["counts"][name] = {f: c[f] for f in present}
        out["fractions"][name] = {f: (c[f] / total if total else math.nan) for f in present}
    for f in present:
        n_conf = out["counts"]["confident"][f]
        n_all = n_conf + out["counts"]["unconfident"][f]
        out["share_in_confident"][f] = n_conf / n_all
    return out
