"""Vocabulary, token table, and the small sequence encoder.

Prompts are whitespace-tokenized against a closed vocabulary: the caption
grammar words, the attribute words, an unconditional null token, and the
learnable placeholder identifiers. Encoding is token embeddings -> masked
mean-pool -> two affine layers with a pointwise nonlinearity.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import synthdata
from .errors import TokenizationError

NULL_TOKEN = "<null>"
GRAMMAR_WORDS = ("a", "photo", "of")
DESCRIPTOR_WORDS = ("color", "pattern", "shape")
PLACEHOLDER_TOKENS = ("sks", "tgt", "ngt", "sks1", "sks2",
                      "tgt1", "ngt1", "tgt2", "ngt2")


def build_vocabulary() -> tuple[str, ...]:
    vocab = [NULL_TOKEN]
    vocab += list(GRAMMAR_WORDS)
    vocab += list(synthdata.SHAPES)
    vocab += list(synthdata.COLOR_SCHEMES)
    vocab += list(synthdata.PATTERNS)
    vocab += list(DESCRIPTOR_WORDS)
    vocab += list(PLACEHOLDER_TOKENS)
    return tuple(vocab)


class TokenTable:
    """Vocabulary plus one embedding row per token.

    The embedding matrix is owned by the checkpoint parameter dict; this
    class only resolves tokens to rows and flags the learnable placeholders.
    """

    def __init__(self, vocab: tuple[str, ...]):
        self.vocab = tuple(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("vocabulary contains duplicates")
        self.placeholders = tuple(t for t in PLACEHOLDER_TOKENS if t in self.index)

    def __len__(self):
        return len(self.vocab)

    def token_id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise TokenizationError(f"unknown token: {token!r}") from None

    def tokenize(self, prompt: str) -> list[int]:
        words = prompt.split()
        if not words:
            raise TokenizationError("empty prompt")
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise TokenizationError(f"unknown token: {unknown[0]!r}")
        return [self.index[w] for w in words]

    def is_placeholder(self, token: str) -> bool:
        return token in self.placeholders


def pad_token_batch(token_ids: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Pad a ragged batch of id lists to (B, L) ids plus a 0/1 mask."""
    L = max(len(t) for t in token_ids)
    ids = np.zeros((len(token_ids), L), dtype=np.int64)
    mask = np.zeros((len(token_ids), L), dtype=np.float64)
    for i, t in enumerate(token_ids):
        ids[i, :len(t)] = t
        mask[i, :len(t)] = 1.0
    return ids, mask


def encoder_forward(params: dict[str, ad.Tensor], ids: np.ndarray,
                    mask: np.ndarray) -> ad.Tensor:
    """Batched text encoding on the tape: (B, L) ids -> (B, d_cond)."""
    emb = ad.embedding(params["tok.emb"], ids)
    pooled = ad.masked_mean(emb, mask)
    h = ad.silu(ad.linear(pooled, params["enc.w1"], params["enc.b1"]))
    return ad.linear(h, params["enc.w2"], params["enc.b2"])


def encode_text(prompt: str, table: TokenTable, params: dict[str, np.ndarray],
                overrides: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Encode one prompt to a condition vector.

    `overrides` substitutes embedding rows by token name before encoding;
    an empty mapping is a no-op. Deterministic.
    """
    ids = table.tokenize(prompt)
    emb_matrix = params["tok.emb"]
    if overrides:
        emb_matrix = emb_matrix.copy()
        for token, vec in overrides.items():
            row = table.token_id(token)
            vec = np.asarray(vec, dtype=emb_matrix.dtype)
            if vec.shape != emb_matrix[row].shape:
                raise ValueError(
                    f"override for {token!r} has shape {vec.shape}, "
                    f"expected {emb_matrix[row].shape}")
            emb_matrix[row] = vec
    tensors = {
        "tok.emb": ad.as_tensor(emb_matrix),
        "enc.w1": ad.as_tensor(params["enc.w1"]),
        "enc.b1": ad.as_tensor(params["enc.b1"]),
        "enc.w2": ad.as_tensor(params["enc.w2"]),
        "enc.b2": ad.as_tensor(params["enc.b2"]),
    }
    ids_arr, mask = pad_token_batch([ids])
    return encoder_forward(tensors, ids_arr, mask).data[0]


def encode_null(table: TokenTable, params: dict[str, np.ndarray]) -> np.ndarray:
    return encode_text(NULL_TOKEN, table, params)
