"""Grayscale images, their two file codecs, mirror padding and bilinear lookup.

Coordinates: pixel centers sit at integer positions, origin top-left, x to the
right and y downward.  ``img.data[y, x]`` is the intensity at (x, y).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

GRID_KINDS = ("cartesian", "logpolar")


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Image:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {a.shape}")
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Patch:
    data: np.ndarray
    grid_kind: str
    lam: float

    def __post_init__(self):
        if self.grid_kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.grid_kind!r}")
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1] or self.data.shape[0] < 2:
            raise ValueError(f"patch must be LxL with L >= 2, got {self.data.shape}")

    @property
    def size(self) -> int:
        return self.data.shape[0]


# -- codecs --------------------------------------------------------------------

RAW_MAGIC = b"LPIM"


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError("truncated PGM header", start)
    return buf[start:pos], pos


def decode_image(buf: bytes, fmt: str) -> Image:
    """Decode ``pgm8`` (binary P5, maxval 255) or ``rawf32`` bytes."""
    if fmt == "pgm8":
        magic, pos = _pgm_token(buf, 0)
        if magic != b"P5":
            raise DecodeError(f"bad PGM magic {magic!r}", 0)
        fields = []
        for _ in range(3):
            start = pos
            tok, pos = _pgm_token(buf, pos)
            if not tok.isdigit():
                raise DecodeError(f"malformed PGM header field {tok!r}", start)
            fields.append(int(tok))
        w, h, maxval = fields
        if maxval != 255:
            raise DecodeError(f"unsupported PGM maxval {maxval}", pos)
        if w < 1 or h < 1:
            raise DecodeError("PGM with empty dimensions", pos)
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise DecodeError("missing whitespace after PGM header", pos)
        pos += 1
        need = w * h
        if len(buf) - pos < need:
            raise DecodeError(f"PGM payload truncated: need {need} bytes, have {len(buf) - pos}",
                              len(buf))
        pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
        return Image((pix.astype(np.float32) / np.float32(255)).reshape(h, w))
    if fmt == "rawf32":
        # header is 16 bytes: magic, H, W and a reserved word
        if len(buf) < 16:
            raise DecodeError("rawf32 header truncated", len(buf))
        if buf[:4] != RAW_MAGIC:
            raise DecodeError(f"bad rawf32 magic {buf[:4]!r}", 0)
        h, w = struct.unpack_from("<II", buf, 4)
        need = 4 * h * w
        if len(buf) - 16 != need:
            raise DecodeError(f"rawf32 size mismatch: need {need} payload bytes, have {len(buf) - 16}",
                              min(len(buf), 16 + need))
        if h < 1 or w < 1:
            raise DecodeError("rawf32 with empty dimensions", 4)
        vals = np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float32).reshape(h, w)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise DecodeError("non-finite value in rawf32 payload", 16 + 4 * int(bad[0]))
        return Image(vals)
    raise ValueError(f"unknown image format {fmt!r}")


def encode_image(img: Image | np.ndarray, fmt: str) -> bytes:
    a = img.data if isinstance(img, Image) else np.asarray(img)
    h, w = a.shape
    if fmt == "pgm8":
        pix = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
        return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()
    if fmt == "rawf32":
        return RAW_MAGIC + struct.pack("<III", h, w, 0) + np.asarray(a, dtype="<f4").tobytes()
    raise ValueError(f"unknown image format {fmt!r}")


def read_image(path) -> Image:
    with open(path, "rb") as f:
        buf = f.read()
    fmt = "rawf32" if buf[:4] == RAW_MAGIC else "pgm8"
    return decode_image(buf, fmt)


def write_image(path, img, fmt: str = "pgm8"):
    with open(path, "wb") as f:
        f.write(encode_image(img, fmt))


# -- resampling ------------------------------------------------------------------

def mirror_pad(img: Image, pad: int) -> Image:
    """Reflect across the border pixel without repeating it (b a | a b c -> b | a b c)."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return img
    if pad >= min(img.height, img.width):
        raise ValueError(f"pad {pad} needs an image larger than {img.height}x{img.width}")
    return Image(np.pad(img.data, pad, mode="reflect"))


def sample(img: Image, xs, ys) -> np.ndarray:
    """Vectorized bilinear lookup with clamp-to-edge neighbours.

    Returns an array shaped like ``xs`` in the image's dtype.  Weights are
    computed in float64.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("sampling coordinates must be finite")
    data = img.data
    h, w = data.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    xa = np.clip(x0, 0, w - 1)
    xb = np.clip(x0 + 1, 0, w - 1)
    ya = np.clip(y0, 0, h - 1)
    yb = np.clip(y0 + 1, 0, h - 1)
    top = data[ya, xa] * (1 - fx) + data[ya, xb] * fx
    bot = data[yb, xa] * (1 - fx) + data[yb, xb] * fx
    return (top * (1 - fy) + bot * fy).astype(data.dtype)


def bilinear_sample(img: Image, x: float, y: float) -> float:
    return float(sample(img, x, y))


def extract_patch(img: Image, grid) -> Patch:
    """Look up ``img`` at every source coordinate of a sampling grid."""
    return Patch(sample(img, grid.src_x, grid.src_y), grid.kind, grid.lam)
