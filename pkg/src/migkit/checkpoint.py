"""Flat binary checkpoint container with a sidecar text manifest.

Layout (all integers little-endian):

    magic   8 bytes  b"MIGKT001"
    count   uint32   number of entries
    entry*  repeated:
        name_len uint16
        name     UTF-8 bytes
        ndim     uint8
        dims     uint32 * ndim
        payload  float64 little-endian, C order, prod(dims) values

The manifest at <path>.manifest lists "name<TAB>dim0xdim1x..." per line in
file order, so a checkpoint can be inspected without parsing the binary.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MIGKT001"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            a = np.ascontiguousarray(a, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.astype("<f8").tobytes(order="C"))
    lines = [f"{name}\t{'x'.join(str(d) for d in a.shape) or 'scalar'}"
             for name, a in arrays.items()]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a migkit checkpoint (bad magic)")
    off = 8
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = a.astype(np.float64)
    return out
