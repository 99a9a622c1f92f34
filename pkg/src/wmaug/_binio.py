"""Little-endian binary reading shared by the on-disk formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class Reader:
    """Bounds-checked cursor over a byte string; errors name the offset."""

    def __init__(self, data: bytes, offset: int = 0, what: str = "stream"):
        self.data = data
        self.offset = offset
        self.what = what

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at offset {self.offset} (need {n} bytes)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int, dtype: str = "<f8") -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * width), dtype=dtype).astype(np.float64)
