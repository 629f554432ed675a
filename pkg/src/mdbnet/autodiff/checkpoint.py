"""MDB1 binary checkpoints.

Layout (little-endian)::

    b"MDB1"
    u32 count
    count x { u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 payload }
    u32 count                      # optimizer-state section, same entry layout
    count x { ... }
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatViolation

MAGIC = b"MDB1"


def _write_section(fh, entries: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatViolation("truncated checkpoint")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_section(reader: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        n = int(np.prod(shape))
        out[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_checkpoint(path, params: dict[str, np.ndarray], optimizer_state: dict[str, np.ndarray] | None = None):
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        _write_section(fh, params)
        _write_section(fh, optimizer_state or {})


def load_checkpoint(path):
    """Return ``(params, optimizer_state)`` as name -> float32 array dicts."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatViolation(f"{path}: bad magic {buf[:4]!r}")
    reader = _Reader(buf)
    reader.pos = 4
    params = _read_section(reader)
    state = _read_section(reader)
    if reader.pos != len(buf):
        raise FormatViolation(f"{path}: {len(buf) - reader.pos} trailing bytes")
    return params, state
