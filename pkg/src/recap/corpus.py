"""Corpus ingestion, synthetic embeddings, caption-duplication analysis, and
interleaved few-shot sample construction.

The interleave builder follows a two-step selection: keep candidates whose
normalized image distance to the query falls in a band (default [0.4, 0.6]),
then rank survivors by caption-embedding similarity and keep the top shots.
ndist = ||e_q - e_r||_2 / 2 maps unit vectors onto [0, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import formats
from .errors import EmptyCorpus, RowCountMismatch
from .index import ImageTextRecord, normalize

log = logging.getLogger(__name__)

SYNTH_BUCKETS = 512


@dataclass(frozen=True)
class Corpus:
    records: list[ImageTextRecord]
    dim: int

    def __len__(self) -> int:
        return len(self.records)

    def matrix(self) -> np.ndarray:
        return np.stack([r.embedding for r in self.records])


@dataclass(frozen=True)
class DedupReport:
    total: int
    duplicated: int
    ratio: float
    top_groups: list[tuple[str, int]]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "duplicated": self.duplicated,
            "ratio": self.ratio,
            "top_groups": [{"caption": c, "count": n} for c, n in self.top_groups],
        }


@dataclass(frozen=True)
class InterleavedSample:
    shots: list[tuple[int, str]]  # (image_id, caption), best shot first
    query: tuple[int, str]
    band_used: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "band_used": [self.band_used[0], self.band_used[1]],
            "shots": [{"id": i, "caption": c} for i, c in self.shots],
            "query": {"id": self.query[0], "caption": self.query[1]},
        }


def ingest_manifest(embeddings_path: str, metadata_path: str) -> Corpus:
    """Load an embeddings.bin / metadata.jsonl pair into a normalized Corpus."""
    matrix = formats.read_embeddings(embeddings_path)
    meta = formats.read_metadata(metadata_path)
    if len(meta) != matrix.shape[0]:
        raise RowCountMismatch(
            f"{matrix.shape[0]} embedding rows but {len(meta)} metadata lines"
        )
    records = [
        ImageTextRecord(
            id=int(m["id"]),
            image_uri=str(m.get("image_uri", "")),
            caption=str(m["caption"]),
            embedding=normalize(matrix[i]),
        )
        for i, m in enumerate(meta)
    ]
    return Corpus(records=records, dim=matrix.shape[1])


def write_corpus(corpus: Corpus, embeddings_path: str, metadata_path: str) -> None:
    formats.write_embeddings(embeddings_path, corpus.matrix())
    formats.write_metadata(
        metadata_path,
        [{"id": r.id, "image_uri": r.image_uri, "caption": r.caption} for r in corpus.records],
    )


@lru_cache(maxsize=8)
def _projection(seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((SYNTH_BUCKETS, dim))


def synth_embed(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic text featurizer standing in for a learned image encoder.

    Byte trigrams (with boundary sentinels so short strings still produce
    features) are hashed into 512 count buckets, projected through a fixed
    seeded Gaussian matrix, and unit-normalized.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    data = b"\x02\x02" + text.encode("utf-8") + b"\x03\x03"
    counts = np.zeros(SYNTH_BUCKETS)
    for i in range(len(data) - 2):
        h = (data[i] * 131 * 131 + data[i + 1] * 131 + data[i + 2]) % SYNTH_BUCKETS
        counts[h] += 1.0
    return normalize(counts @ _projection(seed, dim))


def duplicate_caption_ratio(corpus: Corpus) -> DedupReport:
    """Fraction of records whose normalized caption occurs at least twice."""
    if not corpus.records:
        raise EmptyCorpus("dedup report needs a non-empty corpus")
    groups: dict[str, int] = {}
    for r in corpus.records:
        groups[r.caption_norm] = groups.get(r.caption_norm, 0) + 1
    duplicated = sum(n for n in groups.values() if n >= 2)
    top = sorted(((c, n) for c, n in groups.items() if n >= 2),
                 key=lambda cn: (-cn[1], cn[0]))[:10]
    return DedupReport(
        total=len(corpus.records),
        duplicated=duplicated,
        ratio=duplicated / len(corpus.records),
        top_groups=top,
    )


def build_interleaved(
    corpus: Corpus,
    band_low: float = 0.4,
    band_high: float = 0.6,
    shots: int = 4,
    widen_step: float = 0.05,
    widen_limit: tuple[float, float] = (0.2, 0.8),
    caption_embeddings: dict[int, np.ndarray] | None = None,
    synth_seed: int = 0,
) -> list[InterleavedSample]:
    """Construct few-shot samples: `shots` support pairs plus the query, one
    sample per corpus record (queries with too-sparse neighborhoods are
    skipped and logged)."""
    if not (0.0 <= band_low < band_high <= 1.0):
        raise ValueError("require 0 <= band_low < band_high <= 1")
    if shots < 1:
        raise ValueError("shots must be >= 1")
    records = sorted(corpus.records, key=lambda r: r.id)
    mat = np.stack([r.embedding for r in records])
    if caption_embeddings is not None:
        cap = np.stack([caption_embeddings[r.id] for r in records])
    else:
        cap = np.stack([
            synth_embed(r.caption, dim=max(8, corpus.dim), seed=synth_seed)
            for r in records
        ])
    n = len(records)
    samples: list[InterleavedSample] = []
    for qi in range(n):
        ndist = np.linalg.norm(mat - mat[qi], axis=1) / 2.0
        csim = cap @ cap[qi]
        lo, hi = band_low, band_high
        chosen: list[int] | None = None
        while True:
            in_band = [
                ri for ri in range(n)
                if ri != qi and records[ri].id != records[qi].id
                and lo <= ndist[ri] <= hi
            ]
            if len(in_band) >= shots:
                in_band.sort(key=lambda ri: (-csim[ri], records[ri].id))
                chosen = in_band[:shots]
                break
            if lo <= widen_limit[0] and hi >= widen_limit[1]:
                break
            lo = max(widen_limit[0], lo - widen_step)
            hi = min(widen_limit[1], hi + widen_step)
        if chosen is None:
            log.info("skipping query %d: fewer than %d candidates in band up to %s",
                     records[qi].id, shots, widen_limit)
            continue
        samples.append(InterleavedSample(
            shots=[(records[ri].id, records[ri].caption) for ri in chosen],
            query=(records[qi].id, records[qi].caption),
            band_used=(lo, hi),
        ))
    return samples


def write_interleaved(samples: list[InterleavedSample], path: str) -> None:
    formats.atomic_write_text(
        path, "".join(json.dumps(s.to_dict(), ensure_ascii=False) + "\n" for s in samples)
    )
