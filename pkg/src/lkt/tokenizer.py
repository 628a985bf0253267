"""Word-level vocabulary with the reserved LKT special tokens."""

from __future__ import annotations

import logging
import re
from collections import Counter
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

PAD, CLS, EOS, MASK, UNK, CORRECT, INCORRECT = range(7)
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[EOS]", "[MASK]", "[UNK]", "[CORRECT]", "[INCORRECT]")
RESPONSE_IDS = (CORRECT, INCORRECT)

# A literal special token, a word (hyphenated compounds stay whole), or one
# punctuation mark.
_TOKEN_RE = re.compile("|".join(re.escape(t) for t in SPECIAL_TOKENS) + r"|\w+(?:-\w+)*|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return [t if t in SPECIAL_TOKENS else t.lower() for t in _TOKEN_RE.findall(text)]


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:7]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with the reserved tokens {SPECIAL_TOKENS}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise IndexError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def build_vocab(corpus: Iterable[str], min_freq: int = 1, max_size: int = 30000) -> Vocabulary:
    """Count lowercase word/punctuation tokens and keep the most frequent.

    Ties at equal frequency are broken lexicographically. Special tokens in the
    corpus are not counted; they are always present at ids 0-6.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed {len(SPECIAL_TOKENS)}")
    if isinstance(corpus, str):
        corpus = [corpus]
    counts = Counter()
    for line in corpus:
        counts.update(t for t in tokenize(line) if t not in SPECIAL_TOKENS)
    if not counts:
        log.warning("empty corpus, vocabulary holds only reserved tokens")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + ranked[: max_size - len(SPECIAL_TOKENS)])
