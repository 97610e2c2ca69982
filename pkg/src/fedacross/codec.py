"""Length-prefixed big-endian building blocks shared by every binary format."""

from __future__ import annotations

import struct

import numpy as np

from .errors import ProtocolError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int):
        self._parts.append(struct.pack(">B", v))

    def u32(self, v: int):
        self._parts.append(struct.pack(">I", v))

    def u64(self, v: int):
        self._parts.append(struct.pack(">Q", v))

    def i64(self, v: int):
        self._parts.append(struct.pack(">q", v))

    def f64(self, v: float):
        self._parts.append(struct.pack(">d", v))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._parts.append(raw)

    def raw(self, b: bytes):
        self.u32(len(b))
        self._parts.append(bytes(b))

    def array(self, a: np.ndarray, dtype: str = ">f8"):
        a = np.asarray(a)
        self.u8(a.ndim)
        for n in a.shape:
            self.u32(n)
        self._parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._buf = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._buf):
            raise ProtocolError("truncated payload")
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack(">B")

    def u32(self) -> int:
        return self._unpack(">I")

    def u64(self) -> int:
        return self._unpack(">Q")

    def i64(self) -> int:
        return self._unpack(">q")

    def f64(self) -> float:
        return self._unpack(">d")

    def text(self) -> str:
        return bytes(self._take(self.u32())).decode("utf-8")

    def raw(self) -> bytes:
        return bytes(self._take(self.u32()))

    def array(self, dtype: str = ">f8", native=np.float64) -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        buf = self._take(count * dt.itemsize)
        return np.frombuffer(buf, dtype=dt).astype(native).reshape(shape)

    def done(self) -> bool:
        return self._pos == len(self._buf)

    def expect_done(self):
        if not self.done():
            raise ProtocolError(f"{len(self._buf) - self._pos} trailing bytes")
