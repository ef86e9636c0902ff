"""Binary checkpoint format for named float64 arrays.

Layout (little-endian): magic ``CLVQ1``, u32 version, u32 array count, then
per array a u16 name length, the UTF-8 name, u8 rank, rank x u32 dims and
the float64 payload in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CLVQ1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(buf) < 13:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
            off += 8 * size
            out[name] = payload.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out
