"""Byte-level tokenizer: 256 byte values plus <bos>, <eos>, <sep>."""

from __future__ import annotations

from ..errors import InvalidTokenId

BOS = 256
EOS = 257
SEP = 258
VOCAB_SIZE = 259

SEP_MARKER = "<sep>"


def tokenize(text: str) -> list[int]:
    """UTF-8 byte ids of `text`. Callers add <bos>/<eos> where needed."""
    return list(text.encode("utf-8"))


def tokenize_with_sep(text: str) -> list[int]:
    """Like tokenize, but the literal "<sep>" marker becomes the <sep> token;
    used for rendered prefix-evidence strings."""
    out: list[int] = []
    for piece in text.split(SEP_MARKER):
        out.extend(piece.encode("utf-8"))
        out.append(SEP)
    return out[:-1]


def detokenize(tokens: list[int]) -> str:
    """Inverse of tokenize for byte tokens; specials are stripped."""
    buf = bytearray()
    for t in tokens:
        if not 0 <= t < VOCAB_SIZE:
            raise InvalidTokenId(f"token id {t} out of range")
        if t < 256:
            buf.append(t)
    return buf.decode("utf-8", errors="replace")
