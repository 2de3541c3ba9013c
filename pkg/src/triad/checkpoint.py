"""Binary checkpoints.

Layout (all integers little-endian)::

    magic  b"TRIADCKP"   version u32
    config  u32 length + UTF-8 key=value text
    count   u32
    count x [name u16 length + UTF-8, ndim u8, ndim x u32 extents, float32 LE payload]
    sha256 of every preceding byte (32 bytes)
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_text
from .errors import ConfigError

MAGIC = b"TRIADCKP"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def encode(config: RunConfig, tensors: dict[str, np.ndarray]) -> bytes:
    text = config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype=_F32)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[RunConfig, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 4 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, body, pos)
        pos += size
        return values

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (text_len,) = take("<I")
    text = body[pos:pos + text_len].decode("utf-8")
    pos += text_len
    config = config_from_text(text, "<checkpoint>")
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        tensors[name] = np.frombuffer(body, dtype=_F32, count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return config, tensors


def save(path, model) -> None:
    """Write ``model`` atomically so an interrupted save never clobbers a good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(model.config, model.state_dict()))
    os.replace(tmp, path)


def load(path):
    from .model import ReportModel

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    config, tensors = decode(path.read_bytes())
    model = ReportModel(config, config.n, config.k, config.v)
    model.load_state_dict(tensors)
    return model
