"""Named-tensor checkpoint archive.

Layout, all little-endian:

    magic  "FFCK" (4 bytes)
    version u32 (currently 1)
    count   u32
    count entries of:
        name_len u16, name UTF-8, rank u8, dims u32[rank], payload f32[]
    trailing UTF-8 JSON metadata blob (epoch, lr, schedule state, RNG state)

Entries are written in model parameter order, so a round-trip is bitwise
stable. Payloads are float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FFCK"
VERSION = 1


def save_checkpoint(path, state: dict, metadata: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name, arr in state.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise FormatError(f"{name}: rank {arr.ndim} exceeds format limit")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(json.dumps(metadata, sort_keys=True).encode("utf-8"))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (state dict of float32 arrays, metadata dict)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError(f"{path}: not a checkpoint archive (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        state = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I",
                                 _read_exact(fh, 4 * rank, "dims"))
            n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * n_elem, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            if name in state:
                raise FormatError(f"{path}: duplicate entry {name!r}")
            state[name] = arr
        tail = fh.read()
    try:
        metadata = json.loads(tail.decode("utf-8")) if tail else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt metadata blob") from None
    return state, metadata
