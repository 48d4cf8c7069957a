"""Beam-search caption generation (raw log-prob scoring, no length penalty)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from . import tokenizer as tok
from .network import CaptionModel


def beam_search(model: CaptionModel, image_embedding, *,
                neighbor_captions: list[str] | None = None,
                beam: int = 3, max_len: int = 10,
                mode: str = "standard") -> str:
    """Generate a caption for one image embedding.

    Completed hypotheses (those that emitted <eos>) are held aside; the
    highest total log-prob completed hypothesis wins, falling back to the
    best live one after max_len generated tokens. Ties break on lower token
    id at expansion time. beam=1 is greedy decoding.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    with torch.no_grad():
        latents = model.latents_from_embedding(image_embedding)
        e = e_valid = None
        prefix: list[int] = []
        caps = neighbor_captions or []
        if mode == "prepend":
            for c in caps[:2]:
                prefix.extend(tok.tokenize(c)[: model.config.neighbor_len])
                prefix.append(tok.SEP)
        elif caps:
            e, e_valid = model.encode_neighbor_batch(
                [[tok.tokenize(c) for c in caps[: model.config.k_neighbors]]]
            )

        start = [tok.BOS, *prefix]
        live: list[tuple[float, list[int]]] = [(0.0, list(start))]
        done: list[tuple[float, list[int]]] = []
        budget = model.config.max_len - 1
        for _ in range(max_len):
            still = [(lp, s) for lp, s in live if len(s) < budget]
            done.extend((lp, s) for lp, s in live if len(s) >= budget)
            live = still
            if not live:
                break
            toks = torch.tensor([s for _, s in live], dtype=torch.long)
            logits = model.decoder_forward(
                toks, latents.expand(len(live), -1, -1),
                e.expand(len(live), -1, -1) if e is not None else None,
                e_valid.expand(len(live), -1) if e_valid is not None else None,
                mode=mode,
            )
            logp = F.log_softmax(logits[:, -1, :], dim=-1).numpy()
            candidates = []
            for bi, (lp, _) in enumerate(live):
                for t in range(logp.shape[1]):
                    candidates.append((-(lp + float(logp[bi, t])), t, bi))
            candidates.sort()
            next_live: list[tuple[float, list[int]]] = []
            for neg, t, bi in candidates[: beam]:
                hyp = (-neg, live[bi][1] + [t])
                if t == tok.EOS:
                    done.append(hyp)
                else:
                    next_live.append(hyp)
            live = next_live
        pool = done if done else live
        if not pool:
            return ""
        best = max(pool, key=lambda h: h[0])
        gen = best[1][len(start):]
        return tok.detokenize(gen)


def greedy_decode(model: CaptionModel, image_embedding, *,
                  neighbor_captions: list[str] | None = None,
                  max_len: int = 10, mode: str = "standard") -> str:
    return beam_search(model, image_embedding, neighbor_captions=neighbor_captions,
                       beam=1, max_len=max_len, mode=mode)
