"""Seed derivation.

Every random stream comes from a root seed and a component name:
``derive_seed(root, name)`` is the first 8 bytes (little-endian) of
``sha256(f"{root}:{name}")``. Streams are numpy ``PCG64`` generators, so a
plan or a batch is reproducible from ``(root, name)`` alone.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(root: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, name)))
