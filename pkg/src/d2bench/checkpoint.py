"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"D2CK"  u32 version
    u32 n    n bytes of UTF-8 JSON metadata (sorted keys, compact separators)
    repeated until end of file:
        u32 n  n bytes of UTF-8 parameter name
        u32 rank  rank x u64 dims
        prod(dims) x float64 values, row-major

Metadata always carries the model configuration under ``"model"``.  Saving
the result of a load reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .model import ModelConfig, ModelParams, init_params

MAGIC = b"D2CK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(params: ModelParams, meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    meta["model"] = params.config.to_dict()
    blob = _canonical(meta)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        v = np.ascontiguousarray(arr.values, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", v.ndim))
        parts.append(struct.pack(f"<{v.ndim}Q", *v.shape))
        parts.append(v.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[ModelParams, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a D2CK checkpoint (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n).decode("utf-8"))
    if "model" not in meta:
        raise CheckpointError("metadata lacks the model configuration")
    config = ModelConfig.from_dict(meta["model"])
    arrays: dict[str, dm.Array] = {}
    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        if name in arrays:
            raise CheckpointError(f"duplicate parameter {name!r}")
        arrays[name] = dm.Array(values, requires_grad=True, name=name)
    expected = init_params(config, np.random.default_rng(0))
    for name, a in expected.arrays.items():
        if name not in arrays:
            raise CheckpointError(f"missing parameter {name!r}")
        if arrays[name].shape != a.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arrays[name].shape}, expected {a.shape}")
    extra = set(arrays) - set(expected.arrays)
    if extra:
        raise CheckpointError(f"unexpected parameters {sorted(extra)}")
    meta.pop("model")
    return ModelParams(config, arrays), meta


def save(path, params: ModelParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(params, meta))


def load(path) -> tuple[ModelParams, dict]:
    return decode(Path(path).read_bytes())
