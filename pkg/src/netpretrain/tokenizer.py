"""Word-level tokenizer and vocabulary.

Normalization is lowercasing plus splitting on whitespace/punctuation
boundaries (a token is a maximal run of unicode letters and digits).
Ids 0..4 are reserved for the special tokens and never remapped.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"]
NUM_RESERVED = len(RESERVED)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def normalize(text: str) -> list[str]:
    """Lowercase and split into word tokens; deterministic and total."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    """Bidirectional token/id map with fixed reserved ids 0..4."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(repr=False)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.id_to_token):
            raise ValueError(f"token id {idx} outside vocabulary of size {len(self.id_to_token)}")
        return self.id_to_token[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[:NUM_RESERVED] != RESERVED:
            raise ValueError(f"vocab file {path} does not start with the reserved tokens")
        return cls(id_to_token=tokens, token_to_id={t: i for i, t in enumerate(tokens)})


@dataclass
class TokenSequence:
    """A fixed-length id sequence: [CLS] first, right-padded with [PAD].

    ``flags`` mark real tokens with 1 and padding with 0.
    """

    ids: np.ndarray
    flags: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(corpus: Iterable[str], min_count: int = 1, max_size: int = 50000) -> Vocab:
    """Count word tokens over ``corpus`` and keep the ``max_size`` most
    frequent ones with count >= min_count, ties broken lexically."""
    counts: Counter[str] = Counter()
    seen = False
    for text in corpus:
        seen = True
        counts.update(normalize(text))
    if not seen:
        raise ValueError("build_vocab: empty corpus")
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )[:max_size]
    id_to_token = RESERVED + ranked
    return Vocab(id_to_token=id_to_token, token_to_id={t: i for i, t in enumerate(id_to_token)})


def encode(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """[CLS] + word ids truncated to max_len - 1, right-padded with [PAD]."""
    if max_len < 2:
        raise ValueError(f"encode: max_len must be >= 2, got {max_len}")
    ids = [CLS] + [vocab.lookup(t) for t in normalize(text)[: max_len - 1]]
    n = len(ids)
    out = np.full(max_len, PAD, dtype=np.int32)
    out[:n] = ids
    flags = np.zeros(max_len, dtype=np.int8)
    flags[:n] = 1
    return TokenSequence(ids=out, flags=flags)


def decode(seq: TokenSequence | Sequence[int], vocab: Vocab) -> str:
    """Space-joined tokens with all specials omitted."""
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return " ".join(vocab.token(int(i)) for i in ids if int(i) >= NUM_RESERVED)
