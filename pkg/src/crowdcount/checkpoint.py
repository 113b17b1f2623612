"""Flat binary checkpoints.

Layout (all integers little-endian uint32, values little-endian float64)::

    b"CCTR" | version:u8 | record*
    record = name_len | name (utf-8) | rank | extent * rank | value * prod(extents)

Records run to end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CCTR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<B", VERSION)]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if buf[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {buf[4]}")
    pos = 5
    state = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            vals = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            state[name] = vals.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return state
