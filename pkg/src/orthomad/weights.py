"""Binary weight container.

Layout (all integers little-endian)::

    b"OMAD" | version u32 | count u32 |
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | float32 * prod(dims)
"""
from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"OMAD"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_weights(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes, base_offset: int = 0) -> Dict[str, np.ndarray]:
    """Parse a weight section; offsets in errors are relative to the file start."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", base_offset + pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", base_offset)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", base_offset + 4)
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", base_offset + start) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"elements of {name}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise FormatError("trailing bytes after last parameter", base_offset + pos)
    return out
