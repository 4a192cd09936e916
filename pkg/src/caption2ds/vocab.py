from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
SPECIALS = (BOS, EOS, UNK)

_ALPHA = re.compile(r"^[a-z]+$")


def tokenize(caption: str) -> list[str]:
    """Lowercase, split on whitespace, drop tokens with non-alphabetic characters."""
    return [tok for tok in caption.lower().split() if _ALPHA.match(tok)]


@dataclass
class Vocabulary:
    """Token/id bijection. Special tokens occupy ids 0..2."""

    words: list[str]
    threshold: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        tokens = list(SPECIALS) + list(self.words)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.index)

    def __contains__(self, token):
        return token in self.index

    @property
    def tokens(self) -> list[str]:
        return list(SPECIALS) + list(self.words)

    bos = property(lambda self: 0)
    eos = property(lambda self: 1)
    unk = property(lambda self: 2)

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self):
            raise IndexError(f"token id {idx} out of range")
        return self.tokens[idx]

    def encode(self, caption: str, max_len: int | None = None) -> list[int]:
        ids = [self.id_of(tok) for tok in tokenize(caption)]
        return ids[:max_len] if max_len is not None else ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.token_of(int(i)) for i in ids)

    def to_dict(self) -> dict:
        return {"words": list(self.words), "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["words"]), int(d.get("threshold", 1)))


def build_vocabulary(captions: Iterable[str], threshold: int = 6) -> Vocabulary:
    """Vocabulary of tokens seen at least ``threshold`` times.

    Ids are assigned by descending frequency, ties broken alphabetically;
    rarer tokens map to ``<unk>``.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for caption in captions:
        n += 1
        counts.update(tokenize(caption))
    if n == 0 or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= threshold), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, threshold)
