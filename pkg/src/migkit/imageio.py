"""Minimal PNG (RGB, 8-bit) and PGM writers/readers.

Covers exactly what the kit produces: non-interlaced 8-bit RGB PNGs with
filter type 0 rows and a single IDAT, compressed at a fixed zlib level so
identical pixels give identical bytes. The reader handles this subset and
rejects anything else rather than guessing.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    """rgb: uint8 [H, W, 3]."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"write_png expects uint8 [H,W,3], got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))
    idat = zlib.compress(raw, 6)
    data = _PNG_SIG + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")
    Path(path).write_bytes(data)


def read_png(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != _PNG_SIG:
        raise ValueError(f"{path}: not a PNG")
    off = 8
    width = height = None
    idat = b""
    while off < len(raw):
        (length,) = struct.unpack_from(">I", raw, off)
        tag = raw[off + 4:off + 8]
        payload = raw[off + 8:off + 8 + length]
        off += 12 + length
        if tag == b"IHDR":
            width, height, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", payload)
            if (depth, color, comp, filt, interlace) != (8, 2, 0, 0, 0):
                raise ValueError(f"{path}: unsupported PNG variant (need 8-bit RGB, no interlace)")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if width is None:
        raise ValueError(f"{path}: missing IHDR")
    data = zlib.decompress(idat)
    stride = width * 3 + 1
    if len(data) != stride * height:
        raise ValueError(f"{path}: bad payload size")
    rows = np.frombuffer(data, dtype=np.uint8).reshape(height, stride)
    out = np.empty((height, width, 3), dtype=np.uint8)
    prev = np.zeros(width * 3, dtype=np.uint8)
    for r in range(height):
        ftype = rows[r, 0]
        line = rows[r, 1:].copy()
        if ftype == 0:
            cur = line
        elif ftype == 2:  # Up
            cur = (line.astype(np.int16) + prev).astype(np.uint8)
        else:
            raise ValueError(f"{path}: unsupported filter type {ftype}")
        out[r] = cur.reshape(width, 3)
        prev = cur
    return out


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """gray: uint8 [H, W], binary P5."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1,1] float [3,H,W] -> uint8 [H,W,3]."""
    x = np.clip((img + 1.0) * 0.5, 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(rgb: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> [-1,1] float [3,H,W]."""
    return rgb.astype(np.float64).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0
