"""Writers for the shared binary manifest formats.

This package talks to the captioning toolkit only through its documented
file formats, so the layout is reimplemented here rather than imported:

embeddings.bin (all little-endian):
    magic "RVLM" | format_version u32 (=1) | count u64 | dim u32
    | count*dim float32 row-major | CRC32 of the float payload u32

metadata.jsonl: one JSON object per line, line i describing binary row i.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Iterable

import numpy as np

EMBEDDINGS_MAGIC = b"RVLM"
EMBEDDINGS_VERSION = 1

_HEADER = struct.Struct("<4sIQI")


def atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_embeddings(path: str, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    payload = m.tobytes()
    header = _HEADER.pack(EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, m.shape[0], m.shape[1])
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    atomic_write_bytes(path, header + payload + crc)


def write_metadata(path: str, rows: Iterable[dict]) -> None:
    lines = [json.dumps(r, ensure_ascii=False) for r in rows]
    atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))
