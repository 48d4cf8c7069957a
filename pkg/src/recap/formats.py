"""On-disk formats: embedding matrix files, metadata JSONL, and a small
checksummed container used by index and checkpoint serialization.

embeddings.bin layout (all little-endian):
    magic "RVLM" | format_version u32 (=1) | count u64 | dim u32
    | count*dim float32 row-major | CRC32 of the float payload u32
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Iterable

import numpy as np

from .errors import (
    ChecksumMismatch,
    FormatVersionMismatch,
    IoFailure,
    NonFiniteEmbedding,
    RowCountMismatch,
)

EMBEDDINGS_MAGIC = b"RVLM"
EMBEDDINGS_VERSION = 1

_HEADER = struct.Struct("<4sIQI")


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp file + rename so readers never see partial output."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(str(e)) from e


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_embeddings(path: str, matrix: np.ndarray) -> None:
    """Serialize an (n, dim) float matrix as embeddings.bin."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    payload = m.tobytes()
    header = _HEADER.pack(EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, m.shape[0], m.shape[1])
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    atomic_write_bytes(path, header + payload + crc)


def read_embeddings(path: str) -> np.ndarray:
    """Read embeddings.bin; returns float64 (n, dim). Rejects NaN/Inf rows."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    if len(raw) < _HEADER.size + 4:
        raise FormatVersionMismatch(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != EMBEDDINGS_MAGIC:
        raise FormatVersionMismatch(f"{path}: bad magic at offset 0: {magic!r}")
    if version != EMBEDDINGS_VERSION:
        raise FormatVersionMismatch(f"{path}: unsupported format version {version}")
    need = _HEADER.size + count * dim * 4 + 4
    if len(raw) != need:
        raise RowCountMismatch(
            f"{path}: expected {need} bytes for {count}x{dim}, got {len(raw)}"
        )
    payload = raw[_HEADER.size : -4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch at offset {len(raw) - 4}")
    m = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
    bad = np.where(~np.isfinite(m).all(axis=1))[0]
    if bad.size:
        raise NonFiniteEmbedding(f"{path}: non-finite values in row {int(bad[0])}")
    return m


def write_metadata(path: str, rows: Iterable[dict]) -> None:
    lines = [json.dumps(r, ensure_ascii=False) for r in rows]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_metadata(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    rows = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise FormatVersionMismatch(f"{path}: bad JSON on line {i + 1}") from e
    return rows


# --- generic checksummed container (index / checkpoint files) ---------------

_CONTAINER = struct.Struct("<4sIQ")


def pack_container(magic: bytes, version: int, header: dict, blobs: list[bytes]) -> bytes:
    """magic | version u32 | header_len u64 | header JSON | blobs | CRC32 of
    everything after the magic."""
    hdr = dict(header)
    hdr["blob_sizes"] = [len(b) for b in blobs]
    hjson = json.dumps(hdr, sort_keys=True).encode("utf-8")
    body = _CONTAINER.pack(magic, version, len(hjson))[4:] + hjson + b"".join(blobs)
    crc = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return magic + body + crc


def unpack_container(raw: bytes, magic: bytes, version: int, path: str = "<bytes>") -> tuple[dict, list[bytes]]:
    if len(raw) < _CONTAINER.size + 4 or raw[:4] != magic:
        raise FormatVersionMismatch(f"{path}: bad magic at offset 0")
    body = raw[4:-4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    got_version, hlen = struct.unpack_from("<IQ", raw, 4)
    if got_version != version:
        raise FormatVersionMismatch(f"{path}: unsupported version {got_version}")
    off = _CONTAINER.size
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    blobs = []
    for size in header.pop("blob_sizes", []):
        blobs.append(raw[off : off + size])
        off += size
    if off != len(raw) - 4:
        raise FormatVersionMismatch(f"{path}: trailing bytes after blobs")
    return header, blobs


def load_container(path: str, magic: bytes, version: int) -> tuple[dict, list[bytes]]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return unpack_container(raw, magic, version, path=path)
