"""Corpus-level BLEU@4 and CIDEr-D caption metrics.

Tokenization for both: lowercase, strip ASCII punctuation, split on
whitespace. BLEU is unsmoothed (a zero 4-gram match gives 0). CIDEr-D uses
TF-IDF n-gram cosine with count clipping and a Gaussian length penalty
(sigma = 6), scaled by 10.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass

from .errors import EmptyInput

_PUNCT = str.maketrans("", "", string.punctuation)
SIGMA = 6.0
MAX_N = 4


@dataclass(frozen=True)
class EvalPair:
    candidate: str
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.references:
            raise EmptyInput("every eval pair needs at least one reference")


def metric_tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pairs: list[EvalPair]) -> float:
    """Corpus BLEU with n = 1..4: clipped counts against per-pair maximum
    reference counts, geometric precision mean, brevity penalty with the
    closest reference length."""
    if not pairs:
        raise EmptyInput("bleu4 needs at least one pair")
    matched = [0] * MAX_N
    total = [0] * MAX_N
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        cand = metric_tokenize(pair.candidate)
        refs = [metric_tokenize(r) for r in pair.references]
        cand_len += len(cand)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, MAX_N + 1):
            cc = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                rc = _ngrams(r, n)
                for g, k in rc.items():
                    if k > max_ref[g]:
                        max_ref[g] = k
            total[n - 1] += sum(cc.values())
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in cc.items())
    if any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / MAX_N
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return bp * math.exp(log_prec)


def cider_d(pairs: list[EvalPair]) -> float:
    """CIDEr-D over the pair set; document frequencies come from the
    reference corpus (one document per pair)."""
    if not pairs:
        raise EmptyInput("cider_d needs at least one pair")
    n_images = len(pairs)
    df: list[Counter] = [Counter() for _ in range(MAX_N)]
    for pair in pairs:
        seen: list[set] = [set() for _ in range(MAX_N)]
        for r in pair.references:
            toks = metric_tokenize(r)
            for n in range(1, MAX_N + 1):
                seen[n - 1] |= set(_ngrams(toks, n))
        for n in range(MAX_N):
            for g in seen[n]:
                df[n][g] += 1

    def tfidf(counts: Counter, n: int) -> dict:
        return {
            g: k * math.log(n_images / max(1.0, df[n][g]))
            for g, k in counts.items()
        }

    def norm(vec: dict) -> float:
        return math.sqrt(sum(v * v for v in vec.values()))

    score_total = 0.0
    for pair in pairs:
        cand = metric_tokenize(pair.candidate)
        per_n = []
        for n in range(MAX_N):
            cc = _ngrams(cand, n + 1)
            gc = tfidf(cc, n)
            nc = norm(gc)
            acc = 0.0
            for r in pair.references:
                rt = metric_tokenize(r)
                rc = _ngrams(rt, n + 1)
                gr = tfidf(rc, n)
                nr = norm(gr)
                if nc > 0 and nr > 0:
                    # count clipping: candidate TF clipped to reference TF
                    dot = sum(
                        min(gc[g], gr[g]) * gr[g] for g in gc if g in gr
                    )
                    sim = dot / (nc * nr)
                else:
                    sim = 0.0
                delta = len(cand) - len(rt)
                acc += math.exp(-(delta ** 2) / (2 * SIGMA ** 2)) * sim
            per_n.append(10.0 * acc / len(pair.references))
        score_total += sum(per_n) / MAX_N
    return score_total / n_images
