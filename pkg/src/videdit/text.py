"""Instruction tokenization and a small trainable text encoder.

The diagnostic instruction grammars are closed-vocabulary, so a compact
jointly-trained encoder stands in for a large pretrained language model.
``encode`` returns one vector per instruction word plus a sentence
vector taken at the BOS position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, InputError
from .fusion import MultiHeadAttention, positional_encoding
from .nn import Linear, Module, fan_in_uniform
from .tensor import Tensor

PAD, BOS, UNK = 0, 1, 2
RESERVED = ["<pad>", "<bos>", "<unk>"]

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Deterministic token<->id map with fixed reserved ids PAD/BOS/UNK."""

    def __init__(self, tokens):
        extra = sorted(set(tokens) - set(RESERVED))
        self.id_to_token = list(RESERVED) + extra
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def tokenize(self, text: str) -> list[int]:
        """BOS-prefixed id sequence; unknown words map to UNK."""
        words = split_words(text)
        if not words:
            raise InputError("instruction is empty after trimming")
        return [BOS] + [self.lookup(w) for w in words]

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED)] != RESERVED:
            raise FormatError(f"vocabulary file {path} does not start with reserved tokens")
        vocab = cls([])
        vocab.id_to_token = lines
        vocab.token_to_id = {t: i for i, t in enumerate(lines)}
        return vocab


@dataclass
class TextEmbedding:
    """Sentence vector plus per-word vectors (BOS excluded from e_w)."""
    e_x: Tensor          # (Cx,)
    e_w: Tensor          # (L, Cx)
    length: int


class _EncoderLayer(Module):
    def __init__(self, c_x: int, heads: int, rng, dtype):
        self.mha = MultiHeadAttention(c_x, c_x, c_x, c_x, c_x, heads, rng, dtype)
        self.ff1 = Linear(c_x, 2 * c_x, rng, dtype)
        self.ff2 = Linear(2 * c_x, c_x, rng, dtype)

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        x = T.add(x, self.mha(x, x, x, key_mask=key_mask))
        return T.add(x, self.ff2(T.relu(self.ff1(x))))


class TextEncoder(Module):
    """Token embeddings + sinusoidal positions + 2 self-attention layers."""

    def __init__(self, vocab_size: int, c_x: int, max_len: int = 32,
                 heads: int = 4, layers: int = 2,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.embed = Tensor(fan_in_uniform(rng, (vocab_size, c_x), c_x, dtype),
                            requires_grad=True)
        self.layers = [_EncoderLayer(c_x, heads, rng, dtype) for _ in range(layers)]
        self.max_len = max_len
        self.c_x = c_x
        self._pos = positional_encoding(max_len, c_x, dtype)

    def encode_ids(self, ids: np.ndarray, lengths: np.ndarray):
        """Batched encoding of padded id matrices.

        ids: (B, Lmax) int, BOS first, PAD tail.  lengths counts real ids
        incl. BOS.  Returns (e_x (B,Cx), e_w (B,Lmax-1,Cx), word_mask
        (B,Lmax-1) bool).
        """
        b, lmax = ids.shape
        if lmax > self.max_len:
            raise InputError(f"instruction length {lmax} exceeds maximum {self.max_len}")
        x = T.take_rows(self.embed, ids)
        x = T.add(x, T.constant(self._pos[:lmax].astype(x.data.dtype)))
        key_mask = np.arange(lmax)[None, :] < lengths[:, None]
        for layer in self.layers:
            x = layer(x, key_mask)
        e_x = T.reshape(x[:, 0, :], (b, self.c_x))
        e_w = x[:, 1:, :]
        return e_x, e_w, key_mask[:, 1:]

    def encode(self, tokens) -> TextEmbedding:
        """Single-instruction encoding of a BOS-prefixed id sequence."""
        ids = np.asarray(tokens, dtype=np.int64)[None, :]
        if ids.shape[1] > self.max_len:
            raise InputError(f"instruction length {ids.shape[1]} exceeds maximum {self.max_len}")
        e_x, e_w, _ = self.encode_ids(ids, np.array([ids.shape[1]]))
        length = ids.shape[1] - 1
        return TextEmbedding(e_x=T.reshape(e_x, (self.c_x,)),
                             e_w=T.reshape(e_w, (length, self.c_x)),
                             length=length)


def pad_batch(token_lists: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged id lists into a PAD-filled matrix plus lengths."""
    lengths = np.array([len(t) for t in token_lists], dtype=np.int64)
    lmax = int(lengths.max())
    ids = np.full((len(token_lists), lmax), PAD, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    return ids, lengths
