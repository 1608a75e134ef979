"""Little-endian primitives for the PQEB / PQEC / PQEI container formats."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    NonFiniteValueError,
    TrailingDataError,
    UnexpectedEOFError,
    UnsupportedVersionError,
    ValidationError,
)

FORMAT_VERSION = 1
F32 = np.dtype("<f4")


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self._parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def text(self, s: str) -> None:
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ValidationError(f"identifier too long ({len(data)} bytes): {s[:40]!r}...")
        self.u16(len(data))
        self._parts.append(data)

    def floats(self, arr: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype=F32).tobytes())

    def header(self, magic: bytes, dim: int) -> None:
        self.raw(magic)
        self.u32(FORMAT_VERSION)
        self.u32(dim)

    def save(self, path: str | Path) -> None:
        # exclusive writer: write to a sibling temp file, then atomically replace
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            for part in self._parts:
                fh.write(part)
        tmp.replace(path)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._buf = memoryview(data)
        self._pos = 0

    @classmethod
    def open(cls, path: str | Path) -> "Reader":
        with open(path, "rb") as fh:
            return cls(fh.read())

    def _take(self, n: int) -> memoryview:
        end = self._pos + n
        if end > len(self._buf):
            raise UnexpectedEOFError()
        out = self._buf[self._pos:end]
        self._pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def text(self) -> str:
        n = self.u16()
        return bytes(self._take(n)).decode("utf-8")

    def floats(self, rows: int, dim: int) -> np.ndarray:
        count = rows * dim
        arr = np.frombuffer(self._take(count * 4), dtype=F32).reshape(rows, dim).copy()
        if not np.isfinite(arr).all():
            raise NonFiniteValueError("non-finite value in float block")
        return arr

    def header(self, magic: bytes) -> int:
        """Validate magic and version; return the stored dim."""
        got = bytes(self._take(len(magic))) if len(self._buf) >= len(magic) else None
        if got != magic:
            raise BadMagicError()
        version = self.u32()
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported version {version}")
        return self.u32()

    def finish(self) -> None:
        if self._pos != len(self._buf):
            raise TrailingDataError(f"{len(self._buf) - self._pos} trailing bytes")
