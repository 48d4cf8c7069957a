"""Manifest reading, export passes, and the retrieval self-check."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .encoder import BUILTIN_MODEL_ID, resolve_encoder
from .errors import ManifestError, SelfCheckError, SkipRateExceeded

log = logging.getLogger("exporter")

SELF_CHECK_ROWS = 16
MAX_SKIP_RATE = 0.01


@dataclass
class ManifestLine:
    id: int
    image_path: str
    caption: str


@dataclass
class ExportReport:
    model_id: str
    exported: int
    skipped_ids: list[int] = field(default_factory=list)
    embeddings_path: str = ""
    metadata_path: str = ""

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "exported": self.exported,
            "skipped_ids": self.skipped_ids,
            "embeddings_path": self.embeddings_path,
            "metadata_path": self.metadata_path,
        }


def read_manifest(path: str) -> list[ManifestLine]:
    """Parse and validate the JSONL manifest before any model call."""
    lines: list[ManifestLine] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as f:
        for i, raw in enumerate(f):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
                line = ManifestLine(id=int(row["id"]),
                                    image_path=str(row["image_path"]),
                                    caption=str(row["caption"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}: bad manifest line {i + 1}: {e}") from e
            if line.id in seen:
                raise ManifestError(f"{path}: duplicate id {line.id} on line {i + 1}")
            seen.add(line.id)
            lines.append(line)
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    return lines


def _self_check(matrix: np.ndarray) -> None:
    """Each of the first SELF_CHECK_ROWS rows must be its own top-1 neighbor
    under brute-force cosine over the produced matrix."""
    n = min(SELF_CHECK_ROWS, matrix.shape[0])
    scores = matrix[:n] @ matrix.T
    for i in range(n):
        best = float(np.max(scores[i]))
        # exact byte copies tie at the top score; self then still counts as
        # a top-1 neighbor
        if scores[i, i] < best - 1e-9:
            top = int(np.argmax(scores[i]))
            raise SelfCheckError(
                f"row {i} retrieves row {top} as top-1 (score "
                f"{scores[i, top]:.6f} vs self {scores[i, i]:.6f})"
            )


def _write(out_dir: str, rows: np.ndarray, meta: list[dict],
           model_id: str, exported_ids: list[int], skipped: list[int]) -> ExportReport:
    os.makedirs(out_dir, exist_ok=True)
    emb_path = os.path.join(out_dir, "embeddings.bin")
    meta_path = os.path.join(out_dir, "metadata.jsonl")
    formats.write_embeddings(emb_path, rows)
    formats.write_metadata(meta_path, meta)
    return ExportReport(model_id=model_id, exported=len(exported_ids),
                        skipped_ids=skipped, embeddings_path=emb_path,
                        metadata_path=meta_path)


def export(manifest_path: str, out_dir: str,
           model_id: str = BUILTIN_MODEL_ID, batch_size: int = 8) -> ExportReport:
    """Run the image tower over every readable manifest image and write
    embeddings.bin + metadata.jsonl in manifest order."""
    lines = read_manifest(manifest_path)
    encoder = resolve_encoder(model_id)

    kept: list[ManifestLine] = []
    raws: list[bytes] = []
    skipped: list[int] = []
    for line in lines:
        try:
            with open(line.image_path, "rb") as f:
                raws.append(f.read())
            kept.append(line)
        except OSError as e:
            log.warning("skipping id %d: %s", line.id, e)
            skipped.append(line.id)
    if len(skipped) > MAX_SKIP_RATE * len(lines):
        raise SkipRateExceeded(
            f"{len(skipped)}/{len(lines)} manifest images unreadable "
            f"(ids {skipped[:8]}...)"
        )

    rows = encoder.encode_images(raws, batch_size=batch_size)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    _self_check(rows)
    meta = [{"id": l.id, "image_uri": l.image_path, "caption": l.caption}
            for l in kept]
    return _write(out_dir, rows, meta, model_id, [l.id for l in kept], skipped)


def export_captions(manifest_path: str, out_dir: str,
                    model_id: str = BUILTIN_MODEL_ID,
                    batch_size: int = 8) -> ExportReport:
    """Run the text tower over the manifest captions; same formats."""
    lines = read_manifest(manifest_path)
    encoder = resolve_encoder(model_id)
    rows = encoder.encode_texts([l.caption for l in lines], batch_size=batch_size)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    meta = [{"id": l.id, "image_uri": l.image_path, "caption": l.caption}
            for l in lines]
    return _write(out_dir, rows, meta, model_id, [l.id for l in lines], [])
