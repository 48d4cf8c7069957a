"""Cosine k-NN index over image embeddings: exact flat scan or an
inverted-file (coarse k-means) variant.

All stored vectors are unit-normalized at ingestion, so cosine similarity is
a plain dot product. The index is immutable after build.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    ZeroVector,
)

INDEX_MAGIC = b"RVIX"
INDEX_VERSION = 1

NORM_TOL = 1e-5


def normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm (float64). Direction is preserved."""
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.size < 2:
        raise DimensionMismatch("embedding needs at least 2 components")
    n = float(np.linalg.norm(a))
    if n < 1e-12:
        raise ZeroVector("cannot normalize a (near-)zero vector")
    return a / n


def normalize_caption(caption: str) -> str:
    """NFC-normalize, trim, and collapse internal whitespace. Case preserved."""
    return " ".join(unicodedata.normalize("NFC", caption).split())


@dataclass(frozen=True)
class ImageTextRecord:
    """One (image, caption) entry of the retrieval database."""

    id: int
    image_uri: str
    caption: str
    embedding: np.ndarray
    caption_norm: str = field(default="")

    def __post_init__(self):
        if not self.caption_norm:
            object.__setattr__(self, "caption_norm", normalize_caption(self.caption))


@dataclass(frozen=True)
class IndexConfig:
    mode: str = "exact"  # "exact" | "ivf"
    dim: int = 64
    nlist: int = 16
    nprobe: int = 4
    kmeans_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "ivf"):
            raise ValueError(f"unknown index mode {self.mode!r}")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.mode == "ivf":
            if self.nlist < 1 or self.nprobe < 1 or self.nprobe > self.nlist:
                raise ValueError("require 1 <= nprobe <= nlist")


@dataclass(frozen=True)
class ScoredNeighbor:
    record_id: int
    score: float


def _kmeans_unit(x: np.ndarray, k: int, iters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain k-means with k-means++ seeding on unit vectors.

    Empty clusters are re-seeded from the point farthest from its centroid.
    Returns (centroids (k, d), assignments (n,)).
    """
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    k = min(k, n)

    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        # squared L2 on unit vectors is monotone in cosine; argmin by distance
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members) == 0:
                far = int(dists[np.arange(n), assign].argmax())
                centroids[j] = x[far]
                assign[far] = j
            else:
                centroids[j] = members.mean(axis=0)
    return centroids, assign


class Index:
    """Immutable cosine-similarity index. Use :func:`build` to construct."""

    def __init__(self, config: IndexConfig, records: list[ImageTextRecord],
                 matrix: np.ndarray, centroids: np.ndarray | None,
                 assignments: np.ndarray | None):
        self.config = config
        self.records = records
        self.matrix = matrix  # (n, dim) unit rows, float64
        self.centroids = centroids
        self.assignments = assignments
        self._by_id = {r.id: i for i, r in enumerate(records)}
        if self.config.mode == "ivf":
            self._lists = [np.where(assignments == j)[0] for j in range(len(centroids))]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        return self.config.dim

    def record(self, record_id: int) -> ImageTextRecord:
        return self.records[self._by_id[record_id]]

    def _rank(self, rows: np.ndarray, scores: np.ndarray, k: int) -> list[ScoredNeighbor]:
        ids = np.array([self.records[i].id for i in rows], dtype=np.int64)
        order = np.lexsort((ids, -scores))[:k]
        return [ScoredNeighbor(int(ids[i]), float(scores[i])) for i in order]

    def knn(self, query, k: int) -> list[ScoredNeighbor]:
        """Top-k records by cosine similarity, ties broken by ascending id."""
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[0]} != index dim {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.config.mode == "exact":
            rows = np.arange(len(self.records))
            scores = self.matrix @ q
        else:
            sims = self.centroids @ q
            probe = np.argsort(-sims, kind="stable")[: self.config.nprobe]
            rows = np.concatenate([self._lists[j] for j in probe]) if len(probe) else np.array([], dtype=np.int64)
            if rows.size == 0:
                return []
            scores = self.matrix[rows] @ q
        return self._rank(rows, scores, k)

    # --- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        meta = [
            {"id": r.id, "image_uri": r.image_uri, "caption": r.caption}
            for r in self.records
        ]
        header = {
            "config": {
                "mode": self.config.mode,
                "dim": self.config.dim,
                "nlist": self.config.nlist,
                "nprobe": self.config.nprobe,
                "kmeans_iters": self.config.kmeans_iters,
                "seed": self.config.seed,
            },
            "count": len(self.records),
        }
        blobs = [
            np.ascontiguousarray(self.matrix, dtype="<f8").tobytes(),
            np.array([r.id for r in self.records], dtype="<i8").tobytes(),
            json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8"),
        ]
        if self.config.mode == "ivf":
            blobs.append(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
            blobs.append(np.ascontiguousarray(self.assignments, dtype="<i8").tobytes())
        return formats.pack_container(INDEX_MAGIC, INDEX_VERSION, header, blobs)

    def save(self, path: str) -> None:
        formats.atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, path: str = "<bytes>") -> "Index":
        header, blobs = formats.unpack_container(raw, INDEX_MAGIC, INDEX_VERSION, path=path)
        cfg = IndexConfig(**header["config"])
        n = header["count"]
        matrix = np.frombuffer(blobs[0], dtype="<f8").reshape(n, cfg.dim).astype(np.float64)
        ids = np.frombuffer(blobs[1], dtype="<i8")
        meta = json.loads(blobs[2].decode("utf-8"))
        records = [
            ImageTextRecord(id=int(ids[i]), image_uri=m["image_uri"],
                            caption=m["caption"], embedding=matrix[i])
            for i, m in enumerate(meta)
        ]
        centroids = assignments = None
        if cfg.mode == "ivf":
            centroids = np.frombuffer(blobs[3], dtype="<f8").reshape(-1, cfg.dim).astype(np.float64)
            assignments = np.frombuffer(blobs[4], dtype="<i8").astype(np.int64)
        return cls(cfg, records, matrix, centroids, assignments)

    @classmethod
    def load(cls, path: str) -> "Index":
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            from .errors import IoFailure

            raise IoFailure(str(e)) from e
        return cls.from_bytes(raw, path=path)


def build(records: list[ImageTextRecord], config: IndexConfig) -> Index:
    """Build an immutable index from records; embeddings are re-normalized."""
    if not records:
        raise EmptyCorpus("cannot build an index from zero records")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicateId(f"duplicate record ids: {dupes[:5]}")
    rows = []
    for r in records:
        e = np.asarray(r.embedding, dtype=np.float64).reshape(-1)
        if e.shape[0] != config.dim:
            raise DimensionMismatch(
                f"record {r.id} has dim {e.shape[0]}, index dim {config.dim}"
            )
        rows.append(normalize(e))
    matrix = np.stack(rows)
    centroids = assignments = None
    if config.mode == "ivf":
        centroids, assignments = _kmeans_unit(
            matrix, config.nlist, config.kmeans_iters, config.seed
        )
    normed = [
        ImageTextRecord(id=r.id, image_uri=r.image_uri, caption=r.caption,
                        embedding=matrix[i])
        for i, r in enumerate(records)
    ]
    return Index(config, normed, matrix, centroids, assignments)
