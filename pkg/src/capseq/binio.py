"""Little-endian binary readers/writers shared by the checkpoint and dataset
container formats. Read failures report the byte offset they occurred at."""

from __future__ import annotations

import struct

import numpy as np


class BinaryFormatError(ValueError):
    """Malformed or truncated binary payload; message carries the offset."""


class ByteReader:
    def __init__(self, payload: bytes, label: str):
        self._buf = payload
        self._pos = 0
        self._label = label

    @property
    def offset(self) -> int:
        return self._pos

    def exhausted(self) -> bool:
        return self._pos == len(self._buf)

    def fail(self, message: str):
        raise BinaryFormatError(f"{self._label}: {message} at byte offset {self._pos}")

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            self.fail(f"truncated payload (needed {n} bytes, {len(self._buf) - self._pos} left)")
        chunk = self._buf[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def utf8(self) -> str:
        length = self.u32()
        raw = self.take(length)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail("invalid UTF-8 string")

    def f64_array(self, count: int, shape) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8", count=count).reshape(shape).astype(np.float64)


class ByteWriter:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def utf8(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.raw(raw)

    def f64_array(self, arr: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)
