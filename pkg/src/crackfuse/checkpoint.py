"""Flat binary checkpoint container.

Layout (all integers little-endian):
  magic "IRFF" | format version u32 | parameter count u32
  then per parameter, in store order:
  name length u16 | UTF-8 name | rank u8 | dims u32 each | raw f32 data (LE)

The byte layout is normative: reload tests compare files byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"IRFF"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]):
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:32]!r}...")
        # asarray with order="C", not ascontiguousarray: the latter
        # promotes rank-0 arrays to rank 1 and would corrupt the layout
        a = np.asarray(arr, dtype="<f4", order="C")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    view = memoryview(raw)
    if len(raw) < 12 or view[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        end = pos + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data for parameter {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n,
                                     offset=pos).reshape(dims).copy()
        pos = end
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays
