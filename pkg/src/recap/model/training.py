"""Teacher-forced training with Adam, freeze policies, and batch assembly.

Freeze policies mirror the two-stage recipe: "pretrain" keeps the language
backbone (decoder blocks, text encoder, shared embedding, output head) fixed
and trains only the newly added parts (perceiver, gated visual blocks,
neighbor cross-attention); "finetune" trains everything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import NonFiniteLoss
from . import tokenizer as tok
from .network import CaptionModel

FREEZE_POLICIES = {
    "pretrain": {
        "token_embedding": True,
        "decoder_blocks": True,
        "text_encoder_blocks": True,
        "output_head": True,
        "xattn_blocks": False,
        "retro_blocks": False,
        "perceiver": False,
    },
    "finetune": {g: False for g in (
        "token_embedding", "decoder_blocks", "text_encoder_blocks",
        "output_head", "xattn_blocks", "retro_blocks", "perceiver",
    )},
}

# a retriever callback maps (image_embedding, ground_truth_caption, image_id)
# to the list of neighbor captions to condition on
RetrieverFn = Callable[[np.ndarray, str | None, int | None], list[str]]


@dataclass
class TrainPair:
    image_embedding: np.ndarray
    caption: str
    image_id: int | None = None


@dataclass
class Batch:
    tokens: torch.Tensor        # (B, L) long
    loss_mask: torch.Tensor     # (B, L) bool
    image_embeddings: torch.Tensor | None  # (B, image_dim)
    neighbor_tokens: list[list[list[int]]] | None
    mode: str = "standard"


def caption_sequence(caption: str, prefix_tokens: Sequence[int] = ()) -> tuple[list[int], list[bool]]:
    """[bos] + prefix + caption bytes + [eos]; mask marks caption+eos targets,
    so prefix evidence never contributes to the loss."""
    body = tok.tokenize(caption)
    seq = [tok.BOS, *prefix_tokens, *body, tok.EOS]
    mask = [False] * (1 + len(prefix_tokens)) + [True] * (len(body) + 1)
    return seq, mask


def make_batch(model: CaptionModel, pairs: Sequence[TrainPair],
               neighbor_captions: Sequence[list[str]] | None,
               mode: str = "standard") -> Batch:
    """Pad a group of pairs into one batch; prepend mode renders the top-2
    neighbor captions into the token prefix instead of building E."""
    max_len = model.config.max_len
    seqs, masks, nbt = [], [], []
    for i, p in enumerate(pairs):
        prefix: list[int] = []
        caps = list(neighbor_captions[i]) if neighbor_captions is not None else []
        if mode == "prepend":
            for c in caps[:2]:
                prefix.extend(tok.tokenize(c)[: model.config.neighbor_len])
                prefix.append(tok.SEP)
        seq, mask = caption_sequence(p.caption, prefix)
        budget = max_len
        seqs.append(seq[:budget])
        masks.append(mask[:budget])
        nbt.append([tok.tokenize(c) for c in caps[: model.config.k_neighbors]])
    width = max(len(s) for s in seqs)
    tokens = torch.zeros(len(seqs), width, dtype=torch.long)
    loss_mask = torch.zeros(len(seqs), width, dtype=torch.bool)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        tokens[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        loss_mask[i, : len(m)] = torch.tensor(m, dtype=torch.bool)
    embs = torch.stack([
        torch.as_tensor(np.asarray(p.image_embedding), dtype=torch.float64)
        for p in pairs
    ])
    use_neighbors = (neighbor_captions is not None and mode == "standard")
    return Batch(tokens, loss_mask, embs, nbt if use_neighbors else None, mode)


def batch_loss(model: CaptionModel, batch: Batch,
               use_visual: bool = True) -> torch.Tensor:
    latents = model.latents_from_embedding(batch.image_embeddings) \
        if (use_visual and batch.image_embeddings is not None) else None
    e = e_valid = None
    if batch.neighbor_tokens is not None:
        e, e_valid = model.encode_neighbor_batch(batch.neighbor_tokens)
    return model.sequence_loss(batch.tokens, batch.loss_mask, latents, e, e_valid,
                               mode=batch.mode)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0

    def final_mean(self, window: int = 20) -> float:
        tail = self.losses[-window:]
        return float(np.mean(tail)) if tail else float("nan")


def apply_freeze_policy(model: CaptionModel, policy: str) -> None:
    flags = FREEZE_POLICIES[policy]
    for group, params in model.parameter_groups().items():
        for _, p in params:
            p.requires_grad_(not flags[group])


def train(model: CaptionModel, pairs: Sequence[TrainPair], *,
          retriever_fn: RetrieverFn | None = None,
          policy: str = "finetune", steps: int = 500, lr: float = 1e-3,
          seed: int = 0, batch_size: int = 8, mode: str = "standard",
          log_path: str | None = None,
          log_every: int = 1) -> TrainResult:
    """Adam training loop; deterministic under (seed, data, config).

    Neighbor captions are resolved once up front (the index is immutable and
    queries are fixed), with the pair's own caption passed as the ground
    truth so filtering applies during training.
    """
    torch.set_num_threads(1)
    apply_freeze_policy(model, policy)
    neighbor_captions = None
    if retriever_fn is not None:
        neighbor_captions = [
            retriever_fn(p.image_embedding, p.caption, p.image_id) for p in pairs
        ]

    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(seed)
    result = TrainResult()
    log_lines: list[str] = []
    order = np.arange(len(pairs))
    cursor = len(pairs)  # trigger shuffle on first step

    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(pairs))
            cursor = 0
        idx = order[cursor: cursor + batch_size]
        cursor += batch_size
        chosen = [pairs[i] for i in idx]
        caps = [neighbor_captions[i] for i in idx] if neighbor_captions is not None else None
        batch = make_batch(model, chosen, caps, mode=mode)
        loss = batch_loss(model, batch)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
        if step % log_every == 0:
            log_lines.append(json.dumps({"step": step, "loss": result.losses[-1], "lr": lr}))
    result.steps = steps
    if log_path is not None:
        from .. import formats
        formats.atomic_write_text(log_path, "\n".join(log_lines) + "\n")
    return result


def mean_loss(model: CaptionModel, pairs: Sequence[TrainPair], *,
              retriever_fn: RetrieverFn | None = None,
              mode: str = "standard", batch_size: int = 16) -> float:
    """Evaluation cross-entropy over a held-out set (no grad)."""
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = list(pairs[start: start + batch_size])
            caps = None
            if retriever_fn is not None:
                caps = [retriever_fn(p.image_embedding, None, p.image_id) for p in chunk]
            batch = make_batch(model, chunk, caps, mode=mode)
            n = int(batch.loss_mask[:, 1:].sum())
            total += float(batch_loss(model, batch)) * n
            count += n
    return total / max(count, 1)
