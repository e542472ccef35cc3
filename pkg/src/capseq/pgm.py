"""Minimal portable graymap (PGM) reader/writer.

Reads P2 (ASCII) and P5 (binary) grayscale images; writes P2 so heatmaps stay
diffable text. The maxval from the header doubles as the declared intensity
ceiling for normalization.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(data: bytes):
    """Yield header tokens, skipping whitespace and # comments."""
    i = 0
    n = len(data)
    while i < n:
        c = data[i:i + 1]
        if c.isspace():
            i += 1
            continue
        if c == b"#":
            while i < n and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        yield data[i:j], j
        i = j


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (pixels as int array (H, W), maxval)."""
    data = Path(path).read_bytes()
    gen = _tokens(data)
    try:
        magic, _ = next(gen)
        (w_tok, _), (h_tok, _), (max_tok, end) = next(gen), next(gen), next(gen)
    except StopIteration:
        raise PgmError(f"{path}: truncated PGM header")
    if magic not in (b"P2", b"P5"):
        raise PgmError(f"{path}: unsupported magic {magic!r} (want P2 or P5)")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise PgmError(f"{path}: non-numeric PGM header fields")
    if width <= 0 or height <= 0 or maxval <= 0:
        raise PgmError(f"{path}: invalid PGM dimensions {width}x{height} maxval {maxval}")
    if magic == b"P2":
        values = []
        for tok, _ in _tokens(data[end:]):
            values.append(int(tok))
        if len(values) != width * height:
            raise PgmError(f"{path}: expected {width * height} samples, found {len(values)}")
        arr = np.array(values, dtype=np.int64).reshape(height, width)
    else:
        body = data[end + 1:]
        itemsize = 1 if maxval < 256 else 2
        needed = width * height * itemsize
        if len(body) < needed:
            raise PgmError(f"{path}: expected {needed} raster bytes, found {len(body)}")
        dt = np.uint8 if itemsize == 1 else ">u2"
        arr = np.frombuffer(body[:needed], dtype=dt).astype(np.int64).reshape(height, width)
    if arr.max(initial=0) > maxval:
        raise PgmError(f"{path}: sample exceeds declared maxval {maxval}")
    return arr, maxval


def write_pgm(path, values01: np.ndarray, maxval: int = 255) -> None:
    """Write a [0, 1] float grid as ASCII P2."""
    arr = np.asarray(values01, dtype=np.float64)
    if arr.ndim != 2:
        raise PgmError(f"write_pgm: expected a 2-D grid, got shape {arr.shape}")
    quantized = np.clip(np.rint(arr * maxval), 0, maxval).astype(np.int64)
    lines = [f"P2", f"{arr.shape[1]} {arr.shape[0]}", str(maxval)]
    for row in quantized:
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
