"""ARIT binary checkpoint container.

Layout (little-endian):
    b"ARIT" | u32 version | u32 config length | config JSON (utf-8)
    then per block: u32 name length | name (utf-8) | u32 rank | rank x u32 dims | float32 data

The config JSON carries the block count so a file cut at a block boundary
is still detected as truncated.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from arit.errors import FormatVersionError

MAGIC = b"ARIT"
VERSION = 1
_U32 = struct.Struct("<I")


def write_checkpoint(path, config: dict, blocks: dict[str, np.ndarray]) -> None:
    config = {**config, "n_blocks": len(blocks)}
    body = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(body)), body]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank-0 scalars
        key = name.encode()
        parts += [_U32.pack(len(key)), key, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatVersionError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_checkpoint(path):
    """Returns (config dict, {name: float32 array})."""
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < 4 or r.take(4) != MAGIC:
        raise FormatVersionError(f"{path}: not an ARIT checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        config = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatVersionError(f"{path}: unreadable config block") from exc
    blocks = {}
    while r.pos < len(r.data):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if len(blocks) != config.get("n_blocks"):
        raise FormatVersionError(f"{path}: checkpoint is truncated ({len(blocks)} of {config.get('n_blocks')} blocks)")
    config.pop("n_blocks")
    return config, blocks
