"""Dual-encoder backends.

The default backend is a deterministic built-in encoder: a seeded random
projection over hashed features of the decoded image pixels (image tower)
or of the caption's words and character trigrams (text tower). It needs no
downloaded weights, is fully reproducible, and satisfies the format-level
contract (unit-norm float32 rows, identical input -> identical embedding,
shared-word captions score higher than unrelated ones).

Any other model_id is resolved through sentence-transformers when that
package and the named weights are available locally; otherwise
ModelUnavailable is raised with the underlying reason.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .errors import ModelUnavailable

BUILTIN_MODEL_ID = "builtin/deterministic-v1"

_DIM = 64
_BUCKETS = 1024
_THUMB = (32, 32)


def _projection(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((_BUCKETS, _DIM))


def _hash_counts(tokens: list[bytes], seed: int) -> np.ndarray:
    counts = np.zeros(_BUCKETS, dtype=np.float64)
    for t in tokens:
        h = 2166136261 ^ seed
        for b in t:
            h = ((h ^ b) * 16777619) & 0xFFFFFFFF
        counts[h % _BUCKETS] += 1.0
    return counts


def _normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


class BuiltinDualEncoder:
    model_id = BUILTIN_MODEL_ID
    dim = _DIM

    def __init__(self) -> None:
        self._img_proj = _projection(0x51A7)
        self._txt_proj = _projection(0x7E47)

    def encode_image(self, raw: bytes) -> np.ndarray:
        img = Image.open(io.BytesIO(raw)).convert("L").resize(_THUMB)
        pix = bytes(img.getdata())
        grams = [pix[i : i + 3] for i in range(0, len(pix) - 2, 3)]
        feats = np.sqrt(1.0 + _hash_counts(grams, 11))
        return _normalize(feats @ self._img_proj)

    def encode_images(self, raws: list[bytes], batch_size: int = 8) -> np.ndarray:
        return np.stack([self.encode_image(r) for r in raws])

    def encode_text(self, caption: str) -> np.ndarray:
        words = caption.lower().split()
        tokens = [w.encode("utf-8") for w in words]
        joined = " ".join(words).encode("utf-8")
        tokens += [joined[i : i + 3] for i in range(len(joined) - 2)]
        feats = np.sqrt(1.0 + _hash_counts(tokens, 29))
        return _normalize(feats @ self._txt_proj)

    def encode_texts(self, captions: list[str], batch_size: int = 8) -> np.ndarray:
        return np.stack([self.encode_text(c) for c in captions])


class SentenceTransformerEncoder:
    """Wraps a locally available sentence-transformers dual encoder
    (e.g. a CLIP ViT-B/32 export)."""

    def __init__(self, model_id: str) -> None:
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as e:
            raise ModelUnavailable(f"sentence-transformers not installed: {e}") from e
        try:
            self._model = SentenceTransformer(model_id)
        except Exception as e:  # hub unreachable, weights absent, ...
            raise ModelUnavailable(f"cannot load {model_id!r}: {e}") from e
        self.model_id = model_id
        self.dim = int(self._model.get_sentence_embedding_dimension() or 512)

    def encode_images(self, raws: list[bytes], batch_size: int = 8) -> np.ndarray:
        imgs = [Image.open(io.BytesIO(r)).convert("RGB") for r in raws]
        out = self._model.encode(imgs, batch_size=batch_size,
                                 convert_to_numpy=True, normalize_embeddings=True)
        return np.asarray(out, dtype=np.float64)

    def encode_texts(self, captions: list[str], batch_size: int = 8) -> np.ndarray:
        out = self._model.encode(captions, batch_size=batch_size,
                                 convert_to_numpy=True, normalize_embeddings=True)
        return np.asarray(out, dtype=np.float64)


def resolve_encoder(model_id: str = BUILTIN_MODEL_ID):
    if model_id == BUILTIN_MODEL_ID:
        return BuiltinDualEncoder()
    return SentenceTransformerEncoder(model_id)
