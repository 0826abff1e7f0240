"""Binary checkpoint container ("PFCK") with a JSON hyperparameter sidecar.

Layout (all little-endian):

    magic   4 bytes  "PFCK"
    version u32      1
    count   u32      number of entries
    entry*  u16 name length, UTF-8 name, u8 rank, u32 dims..., raw f32 data

The sidecar lives at ``<path>.json`` and carries whatever metadata dict the
caller provides (hyperparameters, training progress, RNG bookkeeping).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PFCK"
VERSION = 1


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"entry name too long: {name!r}")
        if data.ndim > 0xFF:
            raise FormatError(f"entry rank too large: {name!r}")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    path.write_bytes(bytes(blob))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta or {}, indent=2, sort_keys=True))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    off = 0

    def need(n: int, what: str):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if need(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(need(4 * n, f"data of {name!r}"), dtype="<f4")
        arrays[name] = data.reshape(dims).astype(np.float32)
    if off != len(raw):
        raise FormatError("trailing bytes after last entry", offset=off)

    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return arrays, meta
