"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"C2DS"  u16 version  u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 rank, u32 extent * rank,
                float32 data (row-major)
    u32 metadata length, metadata (utf-8 JSON)

Tensors are written in name order and the JSON uses sorted keys, so equal
models produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cells import CellConfig
from .decoder import DecoderModel
from .vocab import Vocabulary

MAGIC = b"C2DS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: DecoderModel, extra: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    meta = {
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "feature_shape": list(model.feature_shape),
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[DecoderModel, dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after metadata")
    model = DecoderModel(CellConfig.from_dict(meta["config"]), Vocabulary.from_dict(meta["vocab"]),
                         tuple(meta["feature_shape"]), params)
    return model, meta.get("extra", {})


def save(path, model: DecoderModel, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra))


def load(path) -> tuple[DecoderModel, dict]:
    return loads(Path(path).read_bytes())
