"""Per-example perplexity across checkpoints, confidence, and the confidence split."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import InstructionExample, collate
from .errors import ConfigError, ContractError, DataError, InvalidInputError
from .model import Parameters, forward
from .numeric.primitives import log_softmax

DEFAULT_CHECKPOINTS = 5


@dataclass(frozen=True)
class ConfidenceRecord:
    example_id: str
    perplexities: tuple[float, ...]
    confidence: float

    @classmethod
    def from_perplexities(cls, example_id: str, perplexities: Sequence[float]) -> "ConfidenceRecord":
        perps = tuple(float(p) for p in perplexities)
        if not perps:
            raise ContractError("need at least one perplexity")
        if not all(np.isfinite(p) and p > 0 for p in perps):
            raise InvalidInputError(f"{example_id}: perplexities must be finite and > 0")
        return cls(example_id, perps, -float(np.mean(perps)))

    def to_json(self) -> dict:
        return {"id": self.example_id, "perplexities": list(self.perplexities), "confidence": self.confidence}


@dataclass(frozen=True)
class ConfidenceSplit:
    confident_ids: tuple[str, ...]
    unconfident_ids: tuple[str, ...]

    def to_json(self) -> dict:
        return {"confident": list(self.confident_ids), "unconfident": list(self.unconfident_ids)}

    @property
    def all_ids(self) -> set[str]:
        return set(self.confident_ids) | set(self.unconfident_ids)


def nll_from_logits(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise mean of ``-log softmax(logits)[target]`` over masked positions."""
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    counts = mask.sum(axis=-1)
    return -(np.where(mask, picked, 0.0)).sum(axis=-1) / counts


def response_nll(
    params: Parameters,
    examples: Sequence[InstructionExample],
    batch_size: int = 256,
) -> np.ndarray:
    """Teacher-forced mean NLL per scored response token, one value per example."""
    out = np.empty(len(examples))
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        batch = collate(chunk, params.config.max_seq_len)
        logits = forward(params, batch.tokens, batch.pad_mask).logits.data
        out[i : i + len(chunk)] = nll_from_logits(logits, batch.targets, batch.loss_mask)
    return out


def example_nll(params: Parameters, example: InstructionExample) -> float:
    return float(response_nll(params, [example])[0])


def perplexity(params: Parameters, example: InstructionExample) -> float:
    return float(np.exp(example_nll(params, example)))


def compute_confidence(
    checkpoints: Sequence[Parameters],
    dataset: Sequence[InstructionExample],
    batch_size: int = 256,
) -> list[ConfidenceRecord]:
    """Perplexity under each checkpoint (in order); confidence is minus their mean."""
    if not checkpoints:
        raise ContractError("need at least one checkpoint")
    cfg = checkpoints[0].config
    if any(c.config != cfg for c in checkpoints):
        raise ConfigError("checkpoints do not share one model config")
    perps = np.stack([np.exp(response_nll(p, dataset, batch_size)) for p in checkpoints], axis=1)
    return [
        ConfidenceRecord.from_perplexities(ex.id, row) for ex, row in zip(dataset, perps)
    ]


def split(records: Sequence[ConfidenceRecord]) -> ConfidenceSplit:
    """Top half by confidence (ties by ascending id) is confident, the rest unconfident."""
    if len(records) % 2:
        raise ContractError(f"need an even number of records, got {len(records)}")
    ids = [r.example_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate example ids in confidence records")
    for r in records:
        if not np.isfinite(r.confidence):
            raise InvalidInputError(f"{r.example_id}: non-finite confidence")
    ranked = sorted(records, key=lambda r: (-r.confidence, r.example_id))
    half = len(ranked) // 2
    return ConfidenceSplit(
        tuple(r.example_id for r in ranked[:half]),
        tuple(r.example_id for r in ranked[half:]),
    )


def final_hidden_states(
    params: Parameters,
    examples: Sequence[InstructionExample],
    batch_size: int = 256,
) -> np.ndarray:
    """Last-layer hidden state at each example's final (EOS) position."""
    out = np.empty((len(examples), params.config.d_model))
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        batch = collate(chunk, params.config.max_seq_len)
        hidden = forward(params, batch.tokens, batch.pad_mask).hidden.data
        last = batch.pad_mask.sum(axis=1) - 1
        out[i : i + len(chunk)] = hidden[np.arange(len(chunk)), last]
    return out


def export_embeddings(params: Parameters, dataset: Sequence[InstructionExample]) -> list[dict]:
    vectors = final_hidden_states(params, dataset)
    return [
        {"id": ex.id, "family": ex.family, "vector": vec.tolist()}
        for ex, vec in zip(dataset, vectors)
    ]


# -- files --------------------------------------------------------------------


def _write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_confidence(records: Iterable[ConfidenceRecord], path: str | Path) -> None:
    _write_jsonl((r.to_json() for r in records), path)


def read_confidence(path: str | Path) -> list[ConfidenceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = ConfidenceRecord(
                    str(obj["id"]), tuple(float(p) for p in obj["perplexities"]), float(obj["confidence"])
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed confidence record ({exc})") from None
            records.append(rec)
    return records


def write_split(s: ConfidenceSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(s.to_json()) + "\n", encoding="utf-8")


def read_split(path: str | Path) -> ConfidenceSplit:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        s = ConfidenceSplit(tuple(obj["confident"]), tuple(obj["unconfident"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed split file ({exc})") from None
    if set(s.confident_ids) & set(s.unconfident_ids):
        raise DataError(f"{path}: confident and unconfident ids overlap")
    return s


def write_embeddings(rows: Iterable[dict], path: str | Path) -> None:
    _write_jsonl(rows, path)


def check_split_covers(s: ConfidenceSplit, dataset: Sequence[InstructionExample]) -> None:
    ids = {ex.id for ex in dataset}
    if s.all_ids != ids or len(s.confident_ids) + len(s.unconfident_ids) != len(ids):
        missing = len(ids - s.all_ids)
        extra = len(s.all_ids - ids)
        raise DataError(
            f"split does not match the dataset ids ({missing} missing, {extra} unknown)"
        )
