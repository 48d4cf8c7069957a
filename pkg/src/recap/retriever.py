"""Filtered neighbor retrieval plus the two ablation mechanisms:
similarity-scaled token dropout and in-context prefix rendering.

Filtering drops neighbors that are the query image itself or that carry the
query's ground-truth caption, so training cannot shortcut by copying its own
target out of the database.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch
from .index import Index, normalize_caption

PREPEND_SEPARATOR = "<sep>"


@dataclass(frozen=True)
class RetrievalQuery:
    image_embedding: np.ndarray
    image_id: int | None = None
    ground_truth_caption: str | None = None
    caption_norm: str | None = field(default=None)

    def __post_init__(self):
        if self.ground_truth_caption is not None and self.caption_norm is None:
            object.__setattr__(
                self, "caption_norm", normalize_caption(self.ground_truth_caption)
            )


@dataclass(frozen=True)
class Neighbor:
    record_id: int
    image_uri: str
    caption: str
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    neighbors: list[Neighbor]
    k_requested: int
    k_returned: int
    filtered_out_count: int

    def to_dict(self, query_id: int | None = None) -> dict:
        return {
            "query_id": query_id,
            "neighbors": [
                {"id": n.record_id, "score": n.score, "caption": n.caption}
                for n in self.neighbors
            ],
            "filtered_out": self.filtered_out_count,
        }

    def to_trace_line(self, query_id: int | None = None) -> str:
        return json.dumps(self.to_dict(query_id), ensure_ascii=False)


@dataclass(frozen=True)
class FilterPolicy:
    drop_same_image: bool = True
    drop_same_caption: bool = True
    near_duplicate_threshold: float | None = None
    raw_caption_equality: bool = False

    @classmethod
    def none(cls) -> "FilterPolicy":
        return cls(drop_same_image=False, drop_same_caption=False)


def _violates(policy: FilterPolicy, query: RetrievalQuery, record, score: float) -> bool:
    if policy.drop_same_image and query.image_id is not None and record.id == query.image_id:
        return True
    if policy.drop_same_caption and query.ground_truth_caption is not None:
        if policy.raw_caption_equality:
            if record.caption == query.ground_truth_caption:
                return True
        elif record.caption_norm == query.caption_norm:
            return True
    if policy.near_duplicate_threshold is not None and score >= policy.near_duplicate_threshold:
        return True
    return False


def retrieve_filtered(index: Index, query: RetrievalQuery, k: int,
                      policy: FilterPolicy = FilterPolicy()) -> RetrievalResult:
    """Top-k neighbors that survive the filter predicate.

    Over-fetches 2k candidates and doubles the fetch size until k survivors
    are found or the whole database has been scanned. An empty result is a
    valid outcome, not an error.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(index)
    fetch = min(max(2 * k, k + 16), n)
    while True:
        raw = index.knn(query.image_embedding, fetch)
        survivors: list[Neighbor] = []
        dropped = 0
        for sn in raw:
            rec = index.record(sn.record_id)
            if _violates(policy, query, rec, sn.score):
                dropped += 1
                continue
            survivors.append(Neighbor(rec.id, rec.image_uri, rec.caption, sn.score))
            if len(survivors) == k:
                break
        if len(survivors) >= k or fetch >= n:
            survivors = survivors[:k]
            return RetrievalResult(
                neighbors=survivors,
                k_requested=k,
                k_returned=len(survivors),
                filtered_out_count=dropped,
            )
        fetch = min(fetch * 2, n)


def apply_query_dropout(result: RetrievalResult,
                        tokenized_neighbors: list[list[int]],
                        p_max: float, rng_seed: int) -> list[list[int]]:
    """Drop each token of neighbor j independently with probability
    p_max * max(0, score_j). Order is preserved; deterministic under seed."""
    if len(tokenized_neighbors) != len(result.neighbors):
        raise LengthMismatch(
            f"{len(tokenized_neighbors)} token sequences for "
            f"{len(result.neighbors)} neighbors"
        )
    rng = np.random.default_rng(rng_seed)
    out: list[list[int]] = []
    for nb, toks in zip(result.neighbors, tokenized_neighbors):
        p = p_max * max(0.0, nb.score)
        if p <= 0.0 or not toks:
            out.append(list(toks))
            continue
        keep = rng.random(len(toks)) >= p
        out.append([t for t, kp in zip(toks, keep) if kp])
    return out


def render_prepend_context(result: RetrievalResult, n: int = 2) -> str:
    """Top-n captions joined in rank order, each followed by the separator.

    The n=2 default matches the prefix-evidence ablation configuration.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    top = result.neighbors[: min(n, result.k_returned)]
    return "".join(f"{nb.caption}{PREPEND_SEPARATOR}" for nb in top)
