"""Little-endian binary helpers shared by the KB and checkpoint formats.

Tensor record: ``[name_len u32][name utf-8][rows u64][cols u64][data]`` where
data is row-major f64 or f32. Files end with a CRC32 of all preceding bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

DTYPE_F64 = 0
DTYPE_F32 = 1
_NP_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_F32: np.dtype("<f4")}


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def np_dtype(code: int) -> np.dtype:
    try:
        return _NP_DTYPES[code]
    except KeyError:
        raise FormatError(f"unknown dtype code {code}") from None


def encode_matrix(a: np.ndarray, dtype_code: int) -> bytes:
    return np.ascontiguousarray(a, dtype=np_dtype(dtype_code)).tobytes()


def encode_record(name: str, a: np.ndarray, dtype_code: int) -> bytes:
    if a.ndim != 2:
        raise ValueError(f"tensor {name!r} must be 2-D")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<QQ", a.shape[0], a.shape[1])
    return head + encode_matrix(a, dtype_code)


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def strip_crc(blob: bytes) -> bytes:
    if len(blob) < 4:
        raise FormatError("truncated file: no CRC trailer")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC mismatch: file is corrupted or truncated")
    return body


class Reader:
    def __init__(self, body: bytes):
        self.buf = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def matrix(self, rows: int, cols: int, dtype_code: int) -> np.ndarray:
        dt = np_dtype(dtype_code)
        raw = self.take(rows * cols * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(rows, cols)

    def record(self, dtype_code: int) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<I")
        try:
            name = self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc
        rows, cols = self.unpack("<QQ")
        return name, self.matrix(rows, cols, dtype_code)

    def records(self, dtype_code: int) -> dict[str, np.ndarray]:
        out = {}
        while not self.done():
            name, a = self.record(dtype_code)
            if name in out:
                raise FormatError(f"duplicate tensor {name!r}")
            out[name] = a
        return out

    def done(self) -> bool:
        return self.pos == len(self.buf)
