"""Length-prefixed little-endian record codec with a trailing SHA-256."""

import hashlib
import io
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import IntegrityError

DIGEST_SIZE = 32


class RecordWriter:
    """Append-only binary record builder."""

    def __init__(self, magic: bytes, version: int) -> None:
        self._buffer = io.BytesIO()
        self._buffer.write(magic)
        self.u32(version)

    def pack(self, fmt: str, *values: Any) -> None:
        self._buffer.write(struct.pack(fmt, *values))

    def u8(self, value: int) -> None:
        self.pack("<B", value)

    def u32(self, value: int) -> None:
        self.pack("<I", value)

    def u64(self, value: int) -> None:
        self.pack("<Q", value)

    def text(self, value: str) -> None:
        raw = value.encode("utf-8")
        self.u64(len(raw))
        self._buffer.write(raw)

    def u32_list(self, values: Any) -> None:
        array = np.asarray(values, dtype=np.int64).reshape(-1)
        if array.size and (array.min() < 0 or array.max() > 0xFFFFFFFF):
            raise ValueError("value does not fit an unsigned 32-bit integer")
        self.u64(array.size)
        self._buffer.write(array.astype("<u4").tobytes())

    def f32_list(self, values: Any) -> None:
        array = np.asarray(values, dtype="<f4").reshape(-1)
        self.u64(array.size)
        self._buffer.write(array.tobytes())

    def f32_array(self, values: Any) -> None:
        array = np.asarray(values, dtype="<f4")
        self.u32(array.ndim)
        self.pack(f"<{array.ndim}Q", *array.shape)
        raw = array.tobytes()
        self.u64(len(raw))
        self._buffer.write(raw)

    def write(self, path: str | Path) -> int:
        """Seal the payload with its digest and write it; returns the byte count."""
        payload = self._buffer.getvalue()
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payload + hashlib.sha256(payload).digest())
        return len(payload) + DIGEST_SIZE


class RecordReader:
    """Sequential reader over a verified payload."""

    def __init__(self, path: str | Path, magic: bytes, what: str) -> None:
        self.source = str(path)
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise IntegrityError(f"cannot read {what} {path}: {e}") from e
        if len(data) < len(magic) + 4 + DIGEST_SIZE or not data.startswith(magic):
            raise IntegrityError(f"{path} is not a {what} file")
        payload, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
        if hashlib.sha256(payload).digest() != digest:
            raise IntegrityError(f"checksum mismatch in {path}")
        self._data = payload
        self._offset = len(magic)
        self.version = self.u32()

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._data)

    def take(self, size: int) -> bytes:
        if self._offset + size > len(self._data):
            raise IntegrityError(f"{self.source} ends mid-record")
        chunk = self._data[self._offset : self._offset + size]
        self._offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64(self) -> int:
        return self.unpack("<Q")[0]

    def text(self) -> str:
        return self.take(self.u64()).decode("utf-8")

    def u32_list(self) -> np.ndarray:
        count = self.u64()
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)

    def f32_list(self) -> np.ndarray:
        count = self.u64()
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def f32_array(self) -> np.ndarray:
        ndim = self.u32()
        shape = self.unpack(f"<{ndim}Q")
        raw = self.take(self.u64())
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
