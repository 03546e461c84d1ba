"""Binary greyscale PGM (P5, maxval <= 255) reading and writing."""
from __future__ import annotations

import os
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]


class PGMError(ValueError):
    pass


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as P5 with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise PGMError(f"expected a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def _tokens(buf: bytes, count: int):
    """Return the first ``count`` header tokens and the offset just past the last one."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated header")
        out.append(buf[start:pos])
    return out, pos


def read_pgm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    toks, pos = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise PGMError(f"not a binary PGM (magic {toks[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PGMError("non-numeric header field") from None
    if w < 1 or h < 1 or not 0 < maxval <= 255:
        raise PGMError(f"unsupported header {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise PGMError(f"raster truncated: expected {w * h} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
