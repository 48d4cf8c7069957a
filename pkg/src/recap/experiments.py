"""Synthetic corpora and the ablation harness.

Two corpus families drive the directional checks:

* suffix corpus: captions in the same group share a long suffix and their
  images sit close together, so a retrieved neighbor caption reveals most of
  the target. Training with retrieval should beat the retrieval-free twin on
  held-out cross-entropy.

* duplicate corpus: a configurable fraction of records share their caption
  with other records. Training without filtering lets every query retrieve
  its own caption, teaching the model to copy the top neighbor verbatim;
  the exact-copy rate on held-out queries exposes that shortcut.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .index import ImageTextRecord, IndexConfig, build, normalize
from .metrics import EvalPair, bleu4, cider_d
from .model import CaptionModel, ModelConfig, TrainPair, beam_search, mean_loss, tokenize, detokenize, train
from .retriever import (
    FilterPolicy,
    RetrievalQuery,
    apply_query_dropout,
    retrieve_filtered,
)

_LETTERS = string.ascii_lowercase


def _rand_word(rng: np.random.Generator, n: int) -> str:
    return "".join(_LETTERS[i] for i in rng.integers(0, 26, size=n))


def _noisy(base: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    return normalize(base + scale * rng.standard_normal(base.shape))


def make_random_corpus(n: int, dim: int = 64, seed: int = 0) -> Corpus:
    """Unique random captions, independent random embeddings."""
    rng = np.random.default_rng(seed)
    records = [
        ImageTextRecord(
            id=i, image_uri=f"mem://{i}",
            caption=f"{_rand_word(rng, 5)} {_rand_word(rng, 7)} {i}",
            embedding=normalize(rng.standard_normal(dim)),
        )
        for i in range(n)
    ]
    return Corpus(records=records, dim=dim)


@dataclass
class SplitCorpus:
    train: list[ImageTextRecord]
    heldout: list[ImageTextRecord]
    dim: int

    def train_corpus(self) -> Corpus:
        return Corpus(records=self.train, dim=self.dim)


def make_suffix_corpus(n_groups: int = 64, dim: int = 64, seed: int = 0,
                       suffix_len: int = 12, noise: float = 0.7) -> SplitCorpus:
    """Groups of three same-cluster images whose captions share a suffix; two
    members train, the third is held out.

    The within-group noise is deliberately large: group-mates stay each
    other's nearest neighbors (within-cosine ~0.6 vs ~0 across groups), but a
    held-out member is a fresh noisy draw rather than a copy of a training
    embedding, so reading the suffix out of a retrieved group-mate caption is
    far cheaper than memorizing fuzzy cluster boundaries from two samples.
    suffix_len=12 keeps the whole caption (3 + 1 + 12 bytes) inside one
    neighbor window."""
    rng = np.random.default_rng(seed)
    train, heldout = [], []
    next_id = 0
    for _ in range(n_groups):
        suffix = _rand_word(rng, suffix_len)
        base = rng.standard_normal(dim)
        for member in range(3):
            rec = ImageTextRecord(
                id=next_id, image_uri=f"mem://{next_id}",
                caption=f"{_rand_word(rng, 3)} {suffix}",
                embedding=_noisy(base, rng, noise),
            )
            (train if member < 2 else heldout).append(rec)
            next_id += 1
    return SplitCorpus(train=train, heldout=heldout, dim=dim)


def make_duplicate_corpus(n_train: int = 60, n_heldout: int = 20,
                          dup_fraction: float = 0.3, dim: int = 64,
                          seed: int = 0) -> SplitCorpus:
    """Training corpus where ~dup_fraction of records share a caption with
    another record (pairs of near-identical images). Held-out queries are
    fresh images with unique captions."""
    rng = np.random.default_rng(seed)
    train: list[ImageTextRecord] = []
    next_id = 0
    n_dup_pairs = int(round(n_train * dup_fraction / 2))
    for _ in range(n_dup_pairs):
        caption = f"{_rand_word(rng, 4)} {_rand_word(rng, 8)}"
        base = rng.standard_normal(dim)
        for _ in range(2):
            train.append(ImageTextRecord(
                id=next_id, image_uri=f"mem://{next_id}", caption=caption,
                embedding=_noisy(base, rng, 0.05),
            ))
            next_id += 1
    while len(train) < n_train:
        train.append(ImageTextRecord(
            id=next_id, image_uri=f"mem://{next_id}",
            caption=f"{_rand_word(rng, 4)} {_rand_word(rng, 8)}",
            embedding=normalize(rng.standard_normal(dim)),
        ))
        next_id += 1
    heldout = [
        ImageTextRecord(
            id=next_id + i, image_uri=f"mem://{next_id + i}",
            caption=f"{_rand_word(rng, 4)} {_rand_word(rng, 8)}",
            embedding=normalize(rng.standard_normal(dim)),
        )
        for i in range(n_heldout)
    ]
    return SplitCorpus(train=train, heldout=heldout, dim=dim)


# --- retriever callbacks -----------------------------------------------------


def make_retriever_fn(idx, k: int = 2, policy: FilterPolicy | None = None,
                      dropout_p_max: float | None = None, dropout_seed: int = 0):
    """Adapt an index to the training-loop callback signature. With dropout
    active, neighbor captions lose tokens scaled by their similarity."""
    policy = policy if policy is not None else FilterPolicy()

    def fn(embedding, gt_caption, image_id):
        q = RetrievalQuery(
            image_embedding=normalize(embedding),
            image_id=image_id,
            ground_truth_caption=gt_caption,
        )
        result = retrieve_filtered(idx, q, k, policy)
        caps = [n.caption for n in result.neighbors]
        if dropout_p_max is not None and caps:
            toks = [tokenize(c) for c in caps]
            dropped = apply_query_dropout(result, toks, dropout_p_max, dropout_seed)
            caps = [detokenize(t) for t in dropped]
        return caps

    return fn


# --- trained-arm harness -----------------------------------------------------

DEFAULT_ARM_CONFIG = ModelConfig()


@dataclass
class ArmReport:
    name: str
    heldout_ce: float
    exact_copy_rate: float
    bleu4: float
    cider_d: float
    final_train_loss: float
    generations: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "heldout_ce": self.heldout_ce,
            "exact_copy_rate": self.exact_copy_rate,
            "bleu4": self.bleu4,
            "cider_d": self.cider_d,
            "final_train_loss": self.final_train_loss,
        }


def _top1_caption(idx, embedding) -> str | None:
    result = retrieve_filtered(
        idx, RetrievalQuery(image_embedding=normalize(embedding)), 1,
        FilterPolicy.none(),
    )
    return result.neighbors[0].caption if result.neighbors else None


def run_arm(name: str, split: SplitCorpus, *, seed: int,
            use_retrieval: bool, train_policy: FilterPolicy | None = None,
            dropout_p_max: float | None = None, mode: str = "standard",
            steps: int = 600, lr: float = 2e-3, k: int = 2,
            config: ModelConfig | None = None, beam: int = 3,
            gen_max_len: int = 24) -> ArmReport:
    """Train one ablation arm and evaluate it on the held-out split."""
    cfg = config or DEFAULT_ARM_CONFIG
    cfg = ModelConfig(**{**cfg.to_dict(), "seed": seed})
    model = CaptionModel(cfg)
    idx = build(split.train, IndexConfig(mode="exact", dim=split.dim))
    pairs = [TrainPair(r.embedding, r.caption, r.id) for r in split.train]
    retriever_fn = None
    if use_retrieval:
        retriever_fn = make_retriever_fn(
            idx, k=k, policy=train_policy,
            dropout_p_max=dropout_p_max, dropout_seed=seed,
        )
    result = train(model, pairs, retriever_fn=retriever_fn, policy="finetune",
                   steps=steps, lr=lr, seed=seed, mode=mode)

    eval_retriever = make_retriever_fn(idx, k=k, policy=FilterPolicy()) \
        if use_retrieval else None
    held_pairs = [TrainPair(r.embedding, r.caption, None) for r in split.heldout]
    ce = mean_loss(model, held_pairs, retriever_fn=eval_retriever, mode=mode)

    copies = 0
    eval_pairs: list[EvalPair] = []
    generations = []
    for r in split.heldout:
        caps = eval_retriever(r.embedding, None, None) if eval_retriever else None
        gen = beam_search(model, r.embedding, neighbor_captions=caps,
                          beam=beam, max_len=gen_max_len, mode=mode)
        top1 = _top1_caption(idx, r.embedding)
        if top1 is not None and gen == top1:
            copies += 1
        eval_pairs.append(EvalPair(candidate=gen, references=(r.caption,)))
        generations.append({"id": r.id, "generated": gen, "top1": top1,
                            "reference": r.caption})
    n = len(split.heldout)
    return ArmReport(
        name=name,
        heldout_ce=ce,
        exact_copy_rate=copies / n if n else 0.0,
        bleu4=bleu4(eval_pairs),
        cider_d=cider_d(eval_pairs),
        final_train_loss=result.final_mean(),
        generations=generations,
    )


def run_filtering_ablation(seed: int = 0, *, steps: int = 1000, lr: float = 2e-3,
                           split: SplitCorpus | None = None,
                           config: ModelConfig | None = None) -> dict[str, ArmReport]:
    """filter vs. no-filter vs. query-dropout on the duplicate-caption corpus.

    The corpus is larger than the training budget can memorize, and k=1 so the
    sole retrieved caption is the training query itself when filtering is off:
    the un-filtered arm's cheapest route to zero training loss is copying the
    neighbor verbatim, which is exactly the pathology measured at eval."""
    split = split or make_duplicate_corpus(n_train=200, seed=seed)
    common = dict(split=split, seed=seed, steps=steps, lr=lr, k=1, config=config)
    return {
        "filter": run_arm("filter", use_retrieval=True,
                          train_policy=FilterPolicy(), **common),
        "no_filter": run_arm("no_filter", use_retrieval=True,
                             train_policy=FilterPolicy.none(), **common),
        "query_dropout": run_arm("query_dropout", use_retrieval=True,
                                 train_policy=FilterPolicy.none(),
                                 dropout_p_max=0.3, **common),
    }


def run_prepend_ablation(seed: int = 0, *, steps: int = 600, lr: float = 2e-3,
                         split: SplitCorpus | None = None,
                         config: ModelConfig | None = None) -> dict[str, ArmReport]:
    """cross-attention vs. prefix-evidence vs. no retrieval on the suffix corpus."""
    split = split or make_suffix_corpus(seed=seed)
    common = dict(split=split, seed=seed, steps=steps, lr=lr, config=config)
    return {
        "cross_attention": run_arm("cross_attention", use_retrieval=True,
                                   train_policy=FilterPolicy(), **common),
        "prepend": run_arm("prepend", use_retrieval=True,
                           train_policy=FilterPolicy(), mode="prepend", **common),
        "no_retrieval": run_arm("no_retrieval", use_retrieval=False, **common),
    }


def run_retrieval_direction(seed: int = 0, *, steps: int = 800, lr: float = 2e-3,
                            config: ModelConfig | None = None) -> tuple[float, float]:
    """Held-out CE with retrieval vs. without, identical seed and budget."""
    split = make_suffix_corpus(seed=seed)
    with_r = run_arm("with_retrieval", split=split, seed=seed, use_retrieval=True,
                     train_policy=FilterPolicy(), steps=steps, lr=lr, k=1,
                     config=config)
    without = run_arm("no_retrieval", split=split, seed=seed, use_retrieval=False,
                      steps=steps, lr=lr, k=1, config=config)
    return with_r.heldout_ce, without.heldout_ce
