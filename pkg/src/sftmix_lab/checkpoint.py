"""Versioned, checksummed binary checkpoints.

Layout::

    b"SFTMIXCK" | u32 format version | u64 header length | JSON header
    | little-endian float64 arrays in header order | SHA-256 of all prior bytes
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError
from .model import ModelConfig, Parameters, param_shapes
from .optim import AdamState

MAGIC = b"SFTMIXCK"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    params: Parameters
    moments: AdamState | None
    step: int
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = list(ckpt.params.items())
    if ckpt.moments is not None:
        arrays += [(f"adam.m.{k}", v) for k, v in ckpt.moments.m.items()]
        arrays += [(f"adam.v.{k}", v) for k, v in ckpt.moments.v.items()]
    header = {
        "model_config": ckpt.params.config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    if len(blob) < len(MAGIC) + 12 + _DIGEST:
        raise IntegrityError("checkpoint is truncated")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    off = len(MAGIC) + 12
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and config != expected_config:
        raise ConfigError(f"checkpoint model config {config} != expected {expected_config}")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = (
            np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        )
        off += 8 * n
    if off != len(body):
        raise IntegrityError("checkpoint payload length disagrees with header")
    names = [n for n, _ in param_shapes(config)]
    for name, shape in param_shapes(config):
        if name not in arrays or arrays[name].shape != shape:
            raise FormatError(f"parameter {name!r} missing or mis-shaped")
    params = Parameters(config, {n: arrays[n] for n in names})
    moments = None
    if f"adam.m.{names[0]}" in arrays:
        moments = AdamState(
            {n: arrays[f"adam.m.{n}"] for n in names},
            {n: arrays[f"adam.v.{n}"] for n in names},
        )
    return Checkpoint(params, moments, int(header["step"]), header.get("rng_state"), header.get("meta", {}))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_config)
