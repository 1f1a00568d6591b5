"""Named-array binary container shared by checkpoints, datasets and trajectory logs.

Layout (little-endian)::

    b"LDWM"  u32 version  u32 count
    repeat count times:
        u32 name_len  name (utf-8)  u32 rank  u64 dims[rank]  f32 data[prod(dims)]
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LDWM"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic bytes, not an LDWM container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise ContainerError(f"truncated data for array {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if pos != len(blob):
        raise ContainerError("trailing bytes after last array")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
