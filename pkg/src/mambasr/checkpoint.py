"""MSRCKPT1 checkpoint files.

Layout (little-endian throughout)::

    b"MSRCKPT1"
    u64 n, then n bytes of key-sorted compact JSON (config and run state)
    repeated until end of file:
        u64 name length, UTF-8 name, u64 rank, rank x u64 extents,
        prod(extents) x f64 data (row-major)
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MSRCKPT1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    blob = canonical_json(config)
    out += [_U64.pack(len(blob)), blob]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out += [_U64.pack(len(key)), key, _U64.pack(arr.ndim)]
        out += [_U64.pack(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an MSRCKPT1 checkpoint")
    r = _Reader(data)
    r.pos = len(MAGIC)
    try:
        config = json.loads(r.take(r.u64("config length"), "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"config block is not JSON: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(data):
        name = r.take(r.u64("name length"), "name").decode("utf-8")
        shape = tuple(r.u64("extent") for _ in range(r.u64("rank")))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count, name), dtype="<f8").reshape(shape).astype(np.float64)
    return config, tensors


def save(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(config, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            return decode(fh.read())
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
