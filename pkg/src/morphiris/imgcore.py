"""Image value types, bilinear sampling and binary PGM I/O.

Coordinates follow the raster: origin top-left, ``x`` is the column and
``y`` the row (growing downwards).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class FormatError(ValueError):
    """Malformed image file."""


class Point2D(NamedTuple):
    x: float
    y: float


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit single channel raster stored as a read-only ``(height, width)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
                raise ValueError("non-finite intensities")
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("intensities must lie in [0, 255]")
        object.__setattr__(self, "pixels", _frozen(arr, np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def data(self) -> bytes:
        """Row-major intensities."""
        return self.pixels.tobytes()

    @classmethod
    def from_float(cls, values: np.ndarray) -> "GrayImage":
        """Round half-up and clip a real-valued raster into an 8-bit image."""
        return cls(np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8))

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))


BACKGROUND, IRIS, PUPIL = 0, 1, 2


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-pixel class labels: 0 background, 1 iris, 2 pupil."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError("LabelMask needs a 2-D array")
        if arr.size and not np.isin(arr, (BACKGROUND, IRIS, PUPIL)).all():
            raise ValueError("labels must be in {0, 1, 2}")
        object.__setattr__(self, "labels", _frozen(arr, np.uint8))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return bool(np.array_equal(self.labels, other.labels))

    __hash__ = None


# --------------------------------------------------------------------------- PGM

_WS = b" \t\r\n\x0b\x0c"


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace separated header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c[0] in _WS:
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of PGM header at byte {start}")
    return buf[start:pos], pos


def read_pgm(buf: bytes) -> GrayImage:
    """Decode a binary (P5) PGM with maxval 255."""
    buf = bytes(buf)
    if buf[:2] != b"P5":
        raise FormatError("bad magic at byte 0: expected b'P5'")
    pos = 2
    fields = []
    for _ in range(3):
        offset = pos
        tok, pos = _header_token(buf, pos)
        if not re.fullmatch(rb"\d+", tok):
            raise FormatError(f"non-numeric header field {tok!r} at byte {offset}")
        fields.append((int(tok), offset))
    (w, w_off), (h, h_off), (maxval, m_off) = fields
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive dimensions {w}x{h} at byte {w_off}")
    if maxval != 255:
        raise FormatError(f"maxval {maxval} at byte {m_off}; only 255 is supported")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    need = w * h
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated payload at byte {pos + len(payload)}: expected {need} bytes, got {len(payload)}")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(h, w))


def write_pgm(img: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def load_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return read_pgm(fh.read())


def save_pgm(path, img: GrayImage) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pgm(img))


def load_label_mask(path) -> LabelMask:
    """Read an externally produced mask stored as a PGM with pixel values {0,1,2}."""
    return LabelMask(load_pgm(path).pixels)


def save_label_mask(path, mask: LabelMask) -> None:
    save_pgm(path, GrayImage(mask.labels))


# ---------------------------------------------------------------------- sampling

def bilinear_sample_many(pixels: np.ndarray, xs, ys) -> np.ndarray:
    """Vectorised bilinear interpolation of a 2-D array with border clamping."""
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    p = pixels.astype(np.float64, copy=False)
    top = p[y0, x0] * (1.0 - fx) + p[y0, x1] * fx
    bottom = p[y1, x0] * (1.0 - fx) + p[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def bilinear_sample(img: GrayImage, p: Point2D) -> float:
    """Intensity at a sub-pixel location; outside points clamp to the border."""
    return float(bilinear_sample_many(img.pixels, p[0], p[1]))
