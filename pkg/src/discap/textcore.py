"""Vocabulary, tokenization and the caption sequence type."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

BOS, EOS, UNK, PAD = 0, 1, 2, 3
RESERVED = ("<bos>", "<eos>", "<unk>", "<pad>")
MAX_LEN = 16


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("reserved tokens must occupy ids 0-3")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps(list(self.tokens))

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(tuple(json.loads(text)))


@dataclass(frozen=True)
class Caption:
    """Token ids from BOS to EOS; ``logprobs`` covers every id after BOS."""

    ids: tuple[int, ...]
    logprobs: Optional[tuple[float, ...]] = None
    truncated: bool = False

    def __post_init__(self):
        ids = self.ids
        if len(ids) < 2 or ids[0] != BOS or ids[-1] != EOS:
            raise ValueError(f"caption must start with BOS and end with EOS: {ids}")
        if any(i in (BOS, EOS, PAD) for i in ids[1:-1]):
            raise ValueError(f"interior reserved token in caption: {ids}")
        if self.logprobs is not None and len(self.logprobs) != len(ids) - 1:
            raise ValueError("logprobs must have one entry per id after BOS")

    @property
    def body(self) -> tuple[int, ...]:
        return self.ids[1:-1]

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(corpus: Sequence[str], min_count: int = 1) -> Vocab:
    """Reserved ids first, then tokens by descending frequency, ties lexicographic."""
    if not corpus:
        raise ValueError("empty corpus")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for line in corpus for tok in line.split())
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(RESERVED + tuple(t for t in kept if t not in RESERVED))


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> Caption:
    body = [vocab.id(t) for t in text.split()]
    truncated = len(body) + 2 > max_len
    if truncated:
        body = body[: max_len - 2]
    return Caption((BOS, *body, EOS), truncated=truncated)


def detokenize(caption: Caption | Iterable[int], vocab: Vocab) -> str:
    ids = caption.ids if isinstance(caption, Caption) else tuple(caption)
    n = len(vocab)
    words = []
    for i in ids:
        if not 0 <= i < n:
            raise ValueError(f"id out of range: {i}")
        if i > PAD:
            words.append(vocab.tokens[i])
    return " ".join(words)
