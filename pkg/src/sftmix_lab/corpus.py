"""Synthetic instruction/response corpus, character tokenizer and collation.

Four task families with decreasing learnability:

* ``copy``      response repeats the payload
* ``reverse``   response is the payload reversed
* ``const_map`` response applies a fixed letter substitution
* ``noisy``     response is an unrelated random string
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, InvalidInputError, LengthError

FAMILIES = ("copy", "reverse", "const_map", "noisy")
DETERMINISTIC_FAMILIES = ("copy", "reverse", "const_map")

PAD, BOS, SEP, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<sep>", "<eos>")
CHARSET = string.ascii_lowercase + string.ascii_uppercase + " :.,?!-_"
VOCAB_SIZE = len(SPECIALS) + len(CHARSET)

_CHAR_TO_ID = {c: i + len(SPECIALS) for i, c in enumerate(CHARSET)}

# Equal-width prompts; the payload field is left-justified and filled with
# FILL up to max_len, so response position n always sits a fixed distance
# after payload position n (copy and const_map become positional lookups,
# reverse stays length dependent, noisy is unlearnable).
PROMPTS = {
    "copy": "copy: ",
    "reverse": "flip: ",
    "const_map": "swap: ",
    "noisy": "riff: ",
}
FILL = "."

DEFAULT_FRACTIONS = {"copy": 0.3, "reverse": 0.3, "const_map": 0.2, "noisy": 0.2}


def tokenize(text: str) -> list[int]:
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as exc:
        raise InvalidInputError(f"character {exc.args[0]!r} is outside the alphabet") from None


def detokenize(ids: Iterable[int]) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not len(SPECIALS) <= i < VOCAB_SIZE:
            raise InvalidInputError(f"token id {i} is not a character token")
        out.append(CHARSET[i - len(SPECIALS)])
    return "".join(out)


@dataclass(frozen=True)
class InstructionExample:
    id: str
    family: str
    instruction: str
    response: str

    @property
    def instruction_ids(self) -> list[int]:
        return tokenize(self.instruction)

    @property
    def response_ids(self) -> list[int]:
        return tokenize(self.response)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "family": self.family,
            "instruction": self.instruction,
            "response": self.response,
        }


@dataclass(frozen=True)
class CorpusSpec:
    num_examples: int = 2048
    family_fractions: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))
    alphabet_size: int = 26
    min_len: int = 4
    max_len: int = 16
    seed: int = 7
    # Seed of the const_map substitution. Held-out sets reuse the training
    # corpus' value so the mapping stays learnable.
    map_seed: int | None = None

    def validate(self) -> "CorpusSpec":
        if self.num_examples <= 0 or self.num_examples % 2:
            raise ConfigError(
                f"num_examples must be a positive even number, got {self.num_examples}"
            )
        unknown = set(self.family_fractions) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown families: {sorted(unknown)}")
        fr = list(self.family_fractions.values())
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"family fractions must be >= 0 and sum to 1, got {sum(fr)}")
        if not 1 <= self.alphabet_size <= 26:
            raise ConfigError("alphabet_size must be in [1, 26]")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        return self


def family_counts(spec: CorpusSpec) -> dict[str, int]:
    """Largest-remainder apportionment of ``num_examples`` over families."""
    n = spec.num_examples
    fams = [f for f in FAMILIES if f in spec.family_fractions]
    raw = {f: spec.family_fractions[f] * n for f in fams}
    counts = {f: int(np.floor(raw[f])) for f in fams}
    short = n - sum(counts.values())
    for f in sorted(fams, key=lambda f: (-(raw[f] - counts[f]), FAMILIES.index(f)))[:short]:
        counts[f] += 1
    return counts


def substitution(spec: CorpusSpec) -> dict[str, str]:
    letters = string.ascii_lowercase[: spec.alphabet_size]
    seed = spec.seed if spec.map_seed is None else spec.map_seed
    perm = np.random.Generator(np.random.PCG64([seed, 0x5EED])).permutation(len(letters))
    return {a: letters[j] for a, j in zip(letters, perm)}


def _random_string(rng: np.random.Generator, spec: CorpusSpec) -> str:
    letters = string.ascii_lowercase[: spec.alphabet_size]
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return "".join(letters[i] for i in rng.integers(0, len(letters), n))


def make_response(family: str, payload: str, mapping: dict[str, str], rng, spec) -> str:
    if family == "copy":
        return payload
    if family == "reverse":
        return payload[::-1]
    if family == "const_map":
        return "".join(mapping[c] for c in payload)
    if family == "noisy":
        return _random_string(rng, spec)
    raise ConfigError(f"unknown family {family!r}")


def generate_corpus(spec: CorpusSpec) -> list[InstructionExample]:
    """Deterministic corpus; each example draws from its own (seed, index) stream."""
    spec.validate()
    counts = family_counts(spec)
    labels = [f for f in FAMILIES for _ in range(counts.get(f, 0))]
    order = np.random.Generator(np.random.PCG64([spec.seed, 1])).permutation(len(labels))
    mapping = substitution(spec)
    out = []
    for i, j in enumerate(order):
        family = labels[j]
        rng = np.random.Generator(np.random.PCG64([spec.seed, 2, i]))
        payload = _random_string(rng, spec)
        out.append(
            InstructionExample(
                id=f"ex{i:05d}",
                family=family,
                instruction=PROMPTS[family] + payload.ljust(spec.max_len, FILL),
                response=make_response(family, payload, mapping, rng, spec),
            )
        )
    return out


def write_jsonl(examples: Iterable[InstructionExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


def dataset_hash(examples: Iterable[InstructionExample]) -> str:
    """SHA-256 over the canonical JSONL serialization."""
    h = hashlib.sha256()
    for ex in examples:
        h.update((json.dumps(ex.to_json(), ensure_ascii=False) + "\n").encode("utf-8"))
    return h.hexdigest()


def read_jsonl(path: str | Path) -> list[InstructionExample]:
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ex = InstructionExample(
                    id=str(obj["id"]),
                    family=str(obj["family"]),
                    instruction=str(obj["instruction"]),
                    response=str(obj["response"]),
                )
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed example ({exc})") from None
            if ex.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    return examples


@dataclass
class TokenizedBatch:
    tokens: np.ndarray          # [B, L] int64
    response_mask: np.ndarray   # [B, L] bool, true at positions whose *target* is scored
    pad_mask: np.ndarray        # [B, L] bool, true on real tokens
    lengths: list[tuple[int, int]]  # (M_i, N_i) in characters
    ids: list[str]

    @property
    def targets(self) -> np.ndarray:
        """Next-token targets: ``targets[b, t] = tokens[b, t + 1]`` (PAD at the end)."""
        t = np.full_like(self.tokens, PAD)
        t[:, :-1] = self.tokens[:, 1:]
        return t

    @property
    def loss_mask(self) -> np.ndarray:
        """Positions whose next-token prediction is a response token or EOS."""
        m = np.zeros_like(self.response_mask)
        m[:, :-1] = self.response_mask[:, 1:]
        return m

    def response_start(self, row: int) -> int:
        """Index of the SEP token, whose prediction is the first response token."""
        return self.lengths[row][0] + 1

    def scored_length(self, row: int) -> int:
        """Number of scored response positions (response tokens plus EOS)."""
        return self.lengths[row][1] + 1

    def response_tokens(self, row: int) -> np.ndarray:
        m, n = self.lengths[row]
        return self.tokens[row, m + 2 : m + 2 + n + 1]


def collate(examples: Sequence[InstructionExample], max_len: int) -> TokenizedBatch:
    """Rows laid out as ``[BOS, X..., SEP, Y..., EOS, PAD...]``."""
    if not examples:
        raise ContractError("cannot collate an empty batch")
    rows = []
    for ex in examples:
        x, y = ex.instruction_ids, ex.response_ids
        row = [BOS, *x, SEP, *y, EOS]
        if len(row) > max_len:
            raise LengthError(
                f"example {ex.id!r} needs {len(row)} positions but max_len is {max_len}"
            )
        rows.append((row, len(x), len(y)))
    L = max(len(r) for r, _, _ in rows)
    B = len(rows)
    tokens = np.full((B, L), PAD, dtype=np.int64)
    response_mask = np.zeros((B, L), dtype=bool)
    pad_mask = np.zeros((B, L), dtype=bool)
    for b, (row, m, n) in enumerate(rows):
        tokens[b, : len(row)] = row
        pad_mask[b, : len(row)] = True
        response_mask[b, m + 2 : m + 2 + n + 1] = True
    return TokenizedBatch(
        tokens=tokens,
        response_mask=response_mask,
        pad_mask=pad_mask,
        lengths=[(m, n) for _, m, n in rows],
        ids=[ex.id for ex in examples],
    )


def extract(batch: TokenizedBatch, row: int) -> tuple[list[int], list[int]]:
    """Recover the (X, Y) token sequences of one collated row."""
    m, n = batch.lengths[row]
    toks = batch.tokens[row]
    return toks[1 : 1 + m].tolist(), toks[m + 2 : m + 2 + n].tolist()


def index_by_id(examples: Sequence[InstructionExample]) -> dict[str, InstructionExample]:
    return {ex.id: ex for ex in examples}
