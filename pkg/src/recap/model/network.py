"""Desk-scale retrieval-augmented visual decoder.

Architecture, per decoder layer ell:
  (a) if ell % xattn_every == 0 and visual latents are present:
        x += tanh(a_attn) * XAttn(LN(x), latents)
        x += tanh(a_ff)   * FFW(LN(x))
  (b) x += CausalSelfAttn(LN(x))
  (c) if ell % retro_every == 0 and the neighbor encoding has any valid row:
        x += XAttn(LN(x), E)          (ungated)
      x += FFW(LN(x))

Both gate scalars start at zero, so a fresh model ignores the visual input
entirely; an absent or fully-masked neighbor encoding leaves the residual
stream bit-identical. All arithmetic is float64.

The "image" input is a unit embedding vector lifted to a few pseudo-tokens by
a fixed, untrainable seeded linear map; a perceiver resampler turns those
into a fixed number of latents. Neighbor captions go through a bidirectional
text encoder that shares its token embedding with the decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContextOverflow, ShapeMismatch, TooManyNeighbors
from .tokenizer import VOCAB_SIZE

LIFT_SEED = 0x11F7  # fixed: the lift stands in for a frozen pretrained encoder

torch.set_default_dtype(torch.float64)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    ffw_mult: int = 4
    n_latents: int = 8
    k_neighbors: int = 2
    neighbor_len: int = 16
    xattn_every: int = 2
    retro_every: int = 2
    max_len: int = 64
    image_dim: int = 64
    n_visual_tokens: int = 4
    n_encoder_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_latents < 1:
            raise ValueError("n_latents must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _masked_softmax(scores: torch.Tensor, allowed: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last dim; rows with no allowed key get all-zero
    weights instead of NaN."""
    if allowed is None:
        return F.softmax(scores, dim=-1)
    neg = torch.finfo(scores.dtype).min
    masked = scores.masked_fill(~allowed, neg)
    m = masked.amax(dim=-1, keepdim=True)
    e = torch.exp(masked - m) * allowed.to(scores.dtype)
    denom = e.sum(dim=-1, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


class Attention(nn.Module):
    """Multi-head attention with optional boolean mask (True = may attend).
    Projections are bias-free so fully-masked attention is exactly zero."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.dh = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)

    def forward(self, xq: torch.Tensor, xkv: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        b, lq, d = xq.shape
        lk = xkv.shape[1]
        q = self.wq(xq).view(b, lq, self.h, self.dh).transpose(1, 2)
        k = self.wk(xkv).view(b, lk, self.h, self.dh).transpose(1, 2)
        v = self.wv(xkv).view(b, lk, self.h, self.dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / (self.dh ** 0.5)
        if mask is not None:
            mask = mask.unsqueeze(1) if mask.dim() == 3 else mask.view(b, 1, 1, lk)
        w = _masked_softmax(scores, mask)
        out = (w @ v).transpose(1, 2).reshape(b, lq, d)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model * mult)
        self.fc2 = nn.Linear(d_model * mult, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class GatedCrossBlock(nn.Module):
    """Visual cross-attention + feed-forward, each residual scaled by a tanh
    gate initialized at zero, so the block is an identity at start."""

    def __init__(self, d_model: int, n_heads: int, ffw_mult: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.alpha_attn = nn.Parameter(torch.zeros(()))
        self.ln_ff = nn.LayerNorm(d_model)
        self.ffw = FeedForward(d_model, ffw_mult)
        self.alpha_ff = nn.Parameter(torch.zeros(()))

    def forward(self, x, latents):
        x = x + torch.tanh(self.alpha_attn) * self.attn(self.ln_attn(x), latents)
        x = x + torch.tanh(self.alpha_ff) * self.ffw(self.ln_ff(x))
        return x


class RetroBlock(nn.Module):
    """Ungated cross-attention over the neighbor encoding."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)

    def forward(self, x, e, e_valid):
        return x + self.attn(self.ln(x), e, e_valid)


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffw_mult: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln_ff = nn.LayerNorm(d_model)
        self.ffw = FeedForward(d_model, ffw_mult)


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffw_mult: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln_ff = nn.LayerNorm(d_model)
        self.ffw = FeedForward(d_model, ffw_mult)

    def forward(self, x, key_valid):
        x = x + self.attn(self.ln_attn(x), self.ln_attn(x), key_valid)
        x = x + self.ffw(self.ln_ff(x))
        return x


class PerceiverLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffw_mult: int):
        super().__init__()
        self.ln_q = nn.LayerNorm(d_model)
        self.ln_kv = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln_ff = nn.LayerNorm(d_model)
        self.ffw = FeedForward(d_model, ffw_mult)

    def forward(self, latents, visual):
        latents = latents + self.attn(self.ln_q(latents), self.ln_kv(visual))
        latents = latents + self.ffw(self.ln_ff(latents))
        return latents


class CaptionModel(nn.Module):
    """Full pipeline: image embedding -> latents, neighbor captions -> E,
    tokens -> next-token logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        torch.manual_seed(c.seed)

        self.tok_emb = nn.Parameter(torch.randn(VOCAB_SIZE, c.d_model) * 0.02)
        self.dec_pos = nn.Parameter(torch.randn(c.max_len, c.d_model) * 0.02)
        self.decoder_blocks = nn.ModuleList(
            DecoderBlock(c.d_model, c.n_heads, c.ffw_mult) for _ in range(c.n_layers)
        )
        self.ln_final = nn.LayerNorm(c.d_model)
        self.head = nn.Linear(c.d_model, VOCAB_SIZE)
        # small output projection so a fresh model scores every token near
        # uniformly (initial CE ~ ln(vocab))
        with torch.no_grad():
            self.head.weight.normal_(0.0, 0.02)
            self.head.bias.zero_()

        self.xattn_blocks = nn.ModuleDict({
            str(layer): GatedCrossBlock(c.d_model, c.n_heads, c.ffw_mult)
            for layer in range(c.n_layers) if layer % c.xattn_every == 0
        })
        self.retro_blocks = nn.ModuleDict({
            str(layer): RetroBlock(c.d_model, c.n_heads)
            for layer in range(c.n_layers) if layer % c.retro_every == 0
        })

        self.enc_pos = nn.Parameter(torch.randn(c.neighbor_len, c.d_model) * 0.02)
        self.encoder_blocks = nn.ModuleList(
            EncoderBlock(c.d_model, c.n_heads, c.ffw_mult)
            for _ in range(c.n_encoder_layers)
        )
        self.ln_encoder = nn.LayerNorm(c.d_model)

        self.latent_init = nn.Parameter(torch.randn(c.n_latents, c.d_model) * 0.02)
        self.perceiver_layers = nn.ModuleList(
            PerceiverLayer(c.d_model, c.n_heads, c.ffw_mult) for _ in range(2)
        )
        self.ln_latents = nn.LayerNorm(c.d_model)

        lift_rng = np.random.default_rng(LIFT_SEED)
        lift = lift_rng.standard_normal((c.image_dim, c.n_visual_tokens * c.d_model))
        lift /= np.sqrt(c.image_dim)
        self.register_buffer("visual_lift", torch.from_numpy(lift))

        self._causal_cache: dict[int, torch.Tensor] = {}

    # --- parameter groups (freeze policy / checkpoint layout) ---------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "token_embedding": [], "decoder_blocks": [], "xattn_blocks": [],
            "retro_blocks": [], "text_encoder_blocks": [], "perceiver": [],
            "output_head": [],
        }
        for name, p in self.named_parameters():
            groups[self.group_of(name)].append((name, p))
        return groups

    @staticmethod
    def group_of(param_name: str) -> str:
        if param_name == "tok_emb":
            return "token_embedding"
        if param_name.startswith(("dec_pos", "decoder_blocks")):
            return "decoder_blocks"
        if param_name.startswith("xattn_blocks"):
            return "xattn_blocks"
        if param_name.startswith("retro_blocks"):
            return "retro_blocks"
        if param_name.startswith(("enc_pos", "encoder_blocks", "ln_encoder")):
            return "text_encoder_blocks"
        if param_name.startswith(("latent_init", "perceiver_layers", "ln_latents")):
            return "perceiver"
        if param_name.startswith(("ln_final", "head")):
            return "output_head"
        raise KeyError(f"parameter {param_name} not mapped to a group")

    # --- visual path ---------------------------------------------------------

    def lift_image(self, image_embedding) -> torch.Tensor:
        """(B, image_dim) or (image_dim,) -> (B, n_visual_tokens, d_model);
        the lift map is fixed and untrainable."""
        e = torch.as_tensor(np.asarray(image_embedding), dtype=torch.float64)
        if e.dim() == 1:
            e = e.unsqueeze(0)
        if e.shape[-1] != self.config.image_dim:
            raise ShapeMismatch(
                f"image embedding dim {e.shape[-1]} != {self.config.image_dim}"
            )
        v = e @ self.visual_lift
        return v.view(e.shape[0], self.config.n_visual_tokens, self.config.d_model)

    def perceiver_resample(self, visual_tokens: torch.Tensor) -> torch.Tensor:
        """(B, t, d_model) -> (B, n_latents, d_model)."""
        if visual_tokens.dim() == 2:
            visual_tokens = visual_tokens.unsqueeze(0)
        if visual_tokens.shape[-1] != self.config.d_model:
            raise ShapeMismatch("visual token width must equal d_model")
        b = visual_tokens.shape[0]
        latents = self.latent_init.unsqueeze(0).expand(b, -1, -1)
        for layer in self.perceiver_layers:
            latents = layer(latents, visual_tokens)
        return self.ln_latents(latents)

    def latents_from_embedding(self, image_embedding) -> torch.Tensor:
        return self.perceiver_resample(self.lift_image(image_embedding))

    # --- neighbor path -------------------------------------------------------

    def encode_neighbors(self, captions_tokens: list[list[int]],
                         ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode up to k caption token sequences into (E, valid_mask) with
        E of shape (k*m, d_model). Missing slots are fully masked."""
        c = self.config
        if len(captions_tokens) > c.k_neighbors:
            raise TooManyNeighbors(
                f"got {len(captions_tokens)} neighbors, k = {c.k_neighbors}"
            )
        m = c.neighbor_len
        tok = torch.zeros(c.k_neighbors, m, dtype=torch.long)
        valid = torch.zeros(c.k_neighbors, m, dtype=torch.bool)
        for j, seq in enumerate(captions_tokens):
            seq = seq[:m]
            tok[j, : len(seq)] = torch.tensor(seq, dtype=torch.long)
            valid[j, : len(seq)] = True
        x = self.tok_emb[tok] + self.enc_pos[:m]
        slot_valid = valid.any(dim=1)
        if slot_valid.any():
            xs = x[slot_valid]
            vs = valid[slot_valid]
            for block in self.encoder_blocks:
                xs = block(xs, vs)
            xs = self.ln_encoder(xs)
            x = x.clone()
            x[slot_valid] = xs
        e = x.reshape(c.k_neighbors * m, c.d_model)
        return e, valid.reshape(c.k_neighbors * m)

    def encode_neighbor_batch(self, batch_captions: list[list[list[int]]],
                              ) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched encode_neighbors: returns (B, k*m, d) and (B, k*m)."""
        es, masks = [], []
        for caps in batch_captions:
            e, v = self.encode_neighbors(caps)
            es.append(e)
            masks.append(v)
        return torch.stack(es), torch.stack(masks)

    # --- decoder -------------------------------------------------------------

    def _causal(self, n: int) -> torch.Tensor:
        if n not in self._causal_cache:
            self._causal_cache[n] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        return self._causal_cache[n]

    def decoder_forward(self, tokens: torch.Tensor,
                        latents: torch.Tensor | None = None,
                        e: torch.Tensor | None = None,
                        e_valid: torch.Tensor | None = None,
                        mode: str = "standard") -> torch.Tensor:
        """tokens (B, L) -> logits (B, L, vocab). Position p sees tokens <= p.

        mode="prepend" is the prefix-evidence baseline: retrieved text is
        expected inside `tokens` and the neighbor encoding is ignored.
        """
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        b, n = tokens.shape
        if n > self.config.max_len:
            raise ContextOverflow(f"sequence length {n} > max_len {self.config.max_len}")
        if mode == "prepend":
            e = e_valid = None
        use_e = e is not None and e_valid is not None and bool(e_valid.any())
        x = self.tok_emb[tokens] + self.dec_pos[:n]
        causal = self._causal(n).view(1, n, n).expand(b, -1, -1)
        for layer, block in enumerate(self.decoder_blocks):
            key = str(layer)
            if key in self.xattn_blocks and latents is not None:
                x = self.xattn_blocks[key](x, latents)
            x = x + block.attn(block.ln_attn(x), block.ln_attn(x), causal)
            if key in self.retro_blocks and use_e:
                x = self.retro_blocks[key](x, e, e_valid)
            x = x + block.ffw(block.ln_ff(x))
        return self.head(self.ln_final(x))

    def sequence_loss(self, tokens: torch.Tensor, loss_mask: torch.Tensor,
                      latents: torch.Tensor | None = None,
                      e: torch.Tensor | None = None,
                      e_valid: torch.Tensor | None = None,
                      mode: str = "standard") -> torch.Tensor:
        """Mean teacher-forced next-token cross-entropy.

        loss_mask (B, L) marks target positions that count: the loss covers
        predictions of tokens[t] for loss_mask[t] True, t >= 1.
        """
        logits = self.decoder_forward(tokens[:, :-1], latents, e, e_valid, mode)
        targets = tokens[:, 1:]
        mask = loss_mask[:, 1:]
        ce = F.cross_entropy(
            logits.reshape(-1, VOCAB_SIZE), targets.reshape(-1), reduction="none"
        ).view(targets.shape)
        total = mask.to(ce.dtype).sum()
        return (ce * mask.to(ce.dtype)).sum() / torch.clamp(total, min=1.0)
