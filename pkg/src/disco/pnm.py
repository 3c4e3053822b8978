"""Bit-exact binary PPM (P6) and PGM (P5) readers and writers.

Pixel values map linearly between [0, 1] floats and 8-bit integers with
round-half-to-even quantization, so a write/read round trip of quantized
data is lossless and identical across platforms. Parse errors carry the
byte offset of the offending data.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError
from .tensorops import as_tensor


class PnmError(DomainError):
    """Malformed PNM data; ``offset`` locates the problem byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


def quantize(values) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-to-even."""
    v = as_tensor(values, "image values")
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise DomainError("image values must lie in [0, 1]")
    return np.rint(v * 255.0).astype(np.uint8)


def dequantize(bytes_arr) -> np.ndarray:
    return np.asarray(bytes_arr, dtype=np.float64) / 255.0


class _Scanner:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _skip_space(self):
        while self.pos < len(self.data):
            b = self.data[self.pos]
            if b in b" \t\r\n":
                self.pos += 1
            elif b == ord("#"):
                while self.pos < len(self.data) and self.data[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def magic(self) -> bytes:
        if len(self.data) < 2:
            raise PnmError("truncated header", 0)
        self.pos = 2
        return self.data[:2]

    def integer(self, what: str) -> int:
        self._skip_space()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise PnmError(f"expected {what}", start)
        return int(self.data[start:self.pos])

    def payload(self, count: int) -> bytes:
        # Exactly one whitespace byte separates the header from the raster.
        if self.pos >= len(self.data) or self.data[self.pos] not in b" \t\r\n":
            raise PnmError("expected whitespace before raster", self.pos)
        self.pos += 1
        raw = self.data[self.pos:self.pos + count]
        if len(raw) != count:
            raise PnmError(
                f"raster has {len(raw)} bytes, expected {count}",
                self.pos + len(raw))
        if self.pos + count != len(self.data):
            raise PnmError("trailing data after raster", self.pos + count)
        return raw


def _parse(data: bytes, magic: bytes, channels: int):
    sc = _Scanner(data)
    got = sc.magic()
    if got != magic:
        raise PnmError(f"bad magic {got!r}, expected {magic.decode()}", 0)
    width = sc.integer("width")
    height = sc.integer("height")
    if width < 1 or height < 1:
        raise PnmError(f"bad dimensions {width}x{height}", sc.pos)
    maxval = sc.integer("maxval")
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval}", sc.pos)
    raw = sc.payload(width * height * channels)
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr, height, width


def ppm_to_bytes(img) -> bytes:
    """Encode a [3,H,W] float image as binary PPM."""
    img = as_tensor(img, "image")
    if img.ndim != 3 or img.shape[0] != 3:
        raise DomainError(f"PPM image must be [3,H,W], got shape {img.shape}")
    q = quantize(img).transpose(1, 2, 0)
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode("ascii")
    return header + q.tobytes()


def ppm_from_bytes(data: bytes) -> np.ndarray:
    arr, h, w = _parse(data, b"P6", 3)
    return dequantize(arr.reshape(h, w, 3).transpose(2, 0, 1))


def pgm_to_bytes(img) -> bytes:
    """Encode a [H,W] float map as binary PGM."""
    img = as_tensor(img, "image")
    if img.ndim != 2:
        raise DomainError(f"PGM image must be [H,W], got shape {img.shape}")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + quantize(img).tobytes()


def pgm_from_bytes(data: bytes) -> np.ndarray:
    arr, h, w = _parse(data, b"P5", 1)
    return dequantize(arr.reshape(h, w))


def write_ppm(path, img) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_to_bytes(img))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return ppm_from_bytes(fh.read())


def write_pgm(path, img) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_to_bytes(img))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return pgm_from_bytes(fh.read())
