"""Whitespace tokenizer shared by the bridging network and the frozen LM."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

PAD, CLS, DEC, EOS, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[DEC]", "[EOS]", "[UNK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)


def split_words(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        mapping = {tok: i for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(tuple(lines))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    valid: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.valid):
            raise ValueError("ids and valid mask differ in length")
        seen_pad = False
        for v in self.valid:
            if not v:
                seen_pad = True
            elif seen_pad:
                raise ValueError("padding must be a suffix")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_valid(self) -> int:
        return sum(self.valid)

    @property
    def tokens(self) -> tuple[int, ...]:
        """The non-padding ids."""
        return self.ids[: self.n_valid]

    @classmethod
    def from_ids(cls, ids: Sequence[int], max_len: int | None = None) -> "TokenSequence":
        ids = list(ids)
        n = len(ids) if max_len is None else max_len
        ids = ids[:n]
        valid = [True] * len(ids) + [False] * (n - len(ids))
        return cls(tuple(ids + [PAD] * (n - len(ids))), tuple(valid))


def build_vocabulary(corpus: Sequence[str], max_size: int) -> Vocabulary:
    """Specials followed by the most frequent lowercase words (ties broken lexicographically)."""
    if not corpus:
        raise ValueError("empty corpus")
    if max_size < NUM_SPECIALS + 1:
        raise ValueError("max_size must be at least 6")
    counts = Counter(w for line in corpus for w in split_words(line) if w not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: max_size - NUM_SPECIALS]]
    return Vocabulary(SPECIAL_TOKENS + tuple(words))


def encode(
    vocab: Vocabulary,
    text: str,
    prepend: int | None = None,
    append_eos: bool = False,
    max_len: int = 30,
) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if prepend not in (None, CLS, DEC):
        raise ValueError("prepend must be CLS, DEC or None")
    ids = [vocab.id(w) for w in split_words(text)]
    if prepend is not None:
        ids.insert(0, prepend)
    if append_eos:
        ids.append(EOS)
    return TokenSequence.from_ids(ids[:max_len], max_len)


def decode(vocab: Vocabulary, seq: TokenSequence | Sequence[int]) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    words = []
    for i in ids:
        if i < 0 or i >= len(vocab):
            raise ValueError(f"unknown id {i}")
        if i >= NUM_SPECIALS:
            words.append(vocab.tokens[i])
    return " ".join(words)


def collate(seqs: Iterable[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into (ids, valid) tensors, trimming columns that are padding everywhere."""
    seqs = list(seqs)
    width = max((s.n_valid for s in seqs), default=0)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    valid = torch.zeros((len(seqs), width), dtype=torch.bool)
    for row, s in enumerate(seqs):
        toks = s.tokens
        ids[row, : len(toks)] = torch.tensor(toks, dtype=torch.long)
        valid[row, : len(toks)] = True
    return ids, valid
