"""XLMW model checkpoints.

Layout (little-endian)::

    magic    4s  b"XLMW"
    version  u32
    config   u32 byte length + UTF-8 JSON (model config, scales, provenance)
    count    u32 number of parameters
    per parameter:
        u32 name length + UTF-8 name
        u32 ndim, ndim x u32 extents
        f32 values, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XLMW"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, config: dict, params: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, value in params.items():
        raw = name.encode()
        value = np.asarray(value)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an XLMW checkpoint")
    pos = 4
    try:
        version, n = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        config = json.loads(data[pos : pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(data):
                raise CheckpointError(f"{path}: truncated in parameter {name!r}")
            params[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return config, params
