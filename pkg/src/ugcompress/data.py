"""Byte-level corpora.

Token ids are raw byte values 0..255; the ug id lies outside that range and
is never produced here.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def ingest_corpus(path: str | Path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("token ids outside the byte range")
    return arr.astype(np.uint8).tobytes()


class ByteCorpus:
    """Random fixed-length crops of a byte stream."""

    def __init__(self, tokens: np.ndarray, length: int) -> None:
        if len(tokens) < length:
            raise ValueError(f"corpus of {len(tokens)} tokens is shorter than sample length {length}")
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.length = length

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        starts = rng.integers(0, len(self.tokens) - self.length + 1, size=n)
        return np.stack([self.tokens[s : s + self.length] for s in starts])


class SyntheticDocCorpus:
    """Documents that reuse a small private vocabulary of random words.

    Each sample draws ``n_words`` lowercase words of 3..6 letters and emits a
    space-separated stream of them, so text seen earlier in a sample is the
    main source of information about the text that follows.
    """

    def __init__(self, length: int, n_words: int = 6) -> None:
        self.length = length
        self.n_words = n_words

    def _doc(self, rng: np.random.Generator) -> np.ndarray:
        letters = np.arange(ord("a"), ord("z") + 1)
        words = [rng.choice(letters, size=rng.integers(3, 7)) for _ in range(self.n_words)]
        out: list[int] = []
        while len(out) < self.length:
            out.extend(words[rng.integers(self.n_words)].tolist())
            out.append(ord(" "))
        return np.asarray(out[: self.length], dtype=np.int64)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.stack([self._doc(rng) for _ in range(n)])
