"""Expression tokenization and the two-layer bidirectional LSTM sentence encoder."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
RESERVED = (PAD, UNK)

_NON_WORD = re.compile(r"[^a-z0-9\s]+")


def tokenize(expression: str) -> list[str]:
    """Lowercase, drop special characters, split on whitespace."""
    return _NON_WORD.sub(" ", expression.lower()).split()


class Vocabulary:
    """Token ids with ``0`` reserved for padding and ``1`` for unknown words."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {tok: i for i, tok in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self._itos[len(RESERVED):]

    @classmethod
    def build(cls, expressions: Iterable[str]) -> "Vocabulary":
        words = sorted({tok for expr in expressions for tok in tokenize(expr)})
        return cls(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{tok}\n" for tok in self.tokens))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        # line k holds the token with id k + len(RESERVED)
        return cls(line for line in Path(path).read_text().splitlines() if line)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    true_length: int

    def __post_init__(self) -> None:
        if self.true_length > len(self.ids):
            raise ValueError("true_length exceeds sequence length")
        if any(i == PAD_ID for i in self.ids[: self.true_length]):
            raise ValueError("padding inside the non-pad prefix")
        if any(i != PAD_ID for i in self.ids[self.true_length:]):
            raise ValueError("non-pad token after true_length")


def pad_truncate(tokens: Sequence[str], vocab: Vocabulary, t_max: int = 15) -> TokenSequence:
    """Keep the first ``t_max`` tokens and right-pad with PAD ids."""
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    kept = [vocab.id(tok) for tok in tokens[:t_max]]
    return TokenSequence(tuple(kept + [PAD_ID] * (t_max - len(kept))), len(kept))


def encode_expression(expression: str, vocab: Vocabulary, t_max: int = 15) -> TokenSequence:
    return pad_truncate(tokenize(expression), vocab, t_max)


class PaddedEmbedding(nn.Module):
    """Word table whose PAD row is a constant zero buffer, not a parameter.

    Only ids ``1..vocab_size-1`` have trainable rows, so every parameter
    coordinate actually influences the loss through its gradient.
    """

    def __init__(self, vocab_size: int, embed_dim: int):
        super().__init__()
        if PAD_ID != 0:
            raise AssertionError("PAD must be id 0")
        self.rows = nn.Parameter(torch.randn(vocab_size - 1, embed_dim))
        self.register_buffer("pad", torch.zeros(1, embed_dim))

    @property
    def table(self) -> torch.Tensor:
        return torch.cat([self.pad, self.rows], dim=0)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return nn.functional.embedding(ids, self.table)


class TextEncoder(nn.Module):
    """Embedding table followed by two stacked bidirectional LSTM layers.

    Gates follow torch's ``nn.LSTM`` convention (input, forget, cell, output).
    Both layers start from zero hidden and cell states and run over the full
    padded sequence. The output concatenates, per layer, the forward state after
    the last position and the backward state after the first position, giving a
    vector of size ``4 * hidden``.
    """

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.embedding = PaddedEmbedding(vocab_size, embed_dim)
        self.rnn = nn.LSTM(embed_dim, hidden, num_layers=2, bidirectional=True, batch_first=True)

    @property
    def out_dim(self) -> int:
        return 4 * self.hidden

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """``ids`` of shape (B, T) -> text features of shape (B, 4H)."""
        _, (h_n, _) = self.rnn(self.embedding(ids))
        # h_n is (layers * directions, B, H) ordered l1-fw, l1-bw, l2-fw, l2-bw
        return h_n.transpose(0, 1).reshape(ids.shape[0], self.out_dim)


def encode_text(seq: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    """Encode one padded sequence to its ``4H`` feature vector."""
    ids = torch.tensor([seq.ids], dtype=torch.long)
    with torch.no_grad():
        return encoder(ids)[0]
