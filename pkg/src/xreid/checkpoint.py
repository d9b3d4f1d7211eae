"""XRW1 named-array container.

Layout (little-endian): b"XRW1", then until EOF, for each array:
u32 name length, utf-8 name, u32 rank, u32 extents[rank], f64 values (row-major).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"XRW1"


class CheckpointError(ValueError):
    pass


def write_arrays(arrays: dict[str, np.ndarray], path) -> None:
    out = [MAGIC]
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        out.append(np.ascontiguousarray(value).tobytes())
    Path(path).write_bytes(b"".join(out))


def read_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at offset 0, expected {MAGIC!r}")
    off, out = 4, {}

    def need(n):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at offset {off}: need {n} bytes")

    while off < len(buf):
        need(4)
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(n + 4)
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count)
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    return out
