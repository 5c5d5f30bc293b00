"""Fixed toy vocabulary used in place of a pretrained text encoder."""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

CONTEXT_LEN = 8

SHAPES = ("sphere", "box", "cylinder", "cone", "torus")
COLORS = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "white")
COUNTS = ("one", "two", "three")
PAD = "<pad>"
STYLE_3D = "3d_asset"
NEG_LOWQ = "low_quality"


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._ids

    def id(self, tok: str) -> int:
        try:
            return self._ids[tok]
        except KeyError:
            raise ValueError(f"unknown token {tok!r}; vocabulary is {self.tokens}") from None

    def encode(self, words, length: int = CONTEXT_LEN) -> list[int]:
        """Token ids for ``words`` (a list or a whitespace separated string), PAD-filled."""
        if isinstance(words, str):
            words = words.split()
        ids = [self.id(w) for w in words]
        if len(ids) > length:
            raise ValueError(f"caption has {len(ids)} tokens, context holds {length}")
        return ids + [self.pad_id] * (length - len(ids))

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i != self.pad_id]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()


@lru_cache(maxsize=1)
def default_vocab() -> Vocabulary:
    text = resources.files("mvsds").joinpath("vocab.txt").read_text()
    return Vocabulary([line.strip() for line in text.splitlines() if line.strip()])
