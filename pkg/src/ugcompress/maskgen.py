"""Attendability masks for compression-token cross-attention.

Per-segment layout (the only ordering any consumer may assume)::

    keys    = [cache (L_ca) | normal (n) | current ug (k)]
    queries = [normal (n) | current ug (k)]

Normal rows are causal over the segment and see the whole cache. Ug row
``j`` (1-based) sees the whole cache, a variant-dependent field of normal
columns, and current ug columns ``1..j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .segmenter import SegmentPlan, ug_count

VARIANTS = ("stepwise", "segmentation", "full-coverage")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionLayout:
    cache_len: int
    normal_len: int
    ug_len: int

    @property
    def n_queries(self) -> int:
        return self.normal_len + self.ug_len

    @property
    def n_keys(self) -> int:
        return self.cache_len + self.normal_len + self.ug_len


@dataclass(frozen=True)
class Mask:
    matrix: np.ndarray  # bool [queries, keys]
    variant: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def rows(self) -> Iterator[set[int]]:
        """Yield the set of attendable key columns (0-based) per query row."""
        for row in self.matrix:
            yield set(np.flatnonzero(row).tolist())

    def to_ascii(self) -> str:
        return "\n".join("".join("#" if v else "." for v in row) for row in self.matrix) + "\n"

    @classmethod
    def from_ascii(cls, text: str, variant: str) -> "Mask":
        rows = [ln for ln in text.splitlines() if ln]
        return cls(np.array([[c == "#" for c in ln] for ln in rows], dtype=bool), variant)


def ug_field(variant: str, j: int, ratio: int, normal_len: int) -> tuple[int, int]:
    """Normal columns (1-based, inclusive) visible to current ug token ``j``."""
    hi = min(j * ratio, normal_len)
    if variant == "stepwise":
        return 1, hi
    if variant == "segmentation":
        return (j - 1) * ratio + 1, hi
    if variant == "full-coverage":
        return 1, normal_len
    raise LayoutError(f"unknown mask variant {variant!r}")


def _check_layout(layout: AttentionLayout, ratio: int | None, variant: str) -> None:
    if variant not in VARIANTS:
        raise LayoutError(f"unknown mask variant {variant!r}")
    if min(layout.cache_len, layout.normal_len, layout.ug_len) < 0:
        raise LayoutError(f"negative extent in {layout}")
    if layout.n_queries == 0:
        raise LayoutError("layout without query rows")
    if layout.ug_len:
        if layout.normal_len == 0:
            raise LayoutError("ug tokens need at least one normal token")
        if ratio is None or ratio < 1:
            raise LayoutError(f"invalid ratio {ratio}")
        if ug_count(layout.normal_len, ratio) != layout.ug_len:
            raise LayoutError(
                f"{layout.ug_len} ug tokens inconsistent with ceil({layout.normal_len}/{ratio})"
            )


def _fill_segment(
    out: np.ndarray,
    row0: int,
    normal_cols: int,
    ug_cols: int,
    normal_len: int,
    k: int,
    ratio: int | None,
    variant: str,
    ug_causal: bool,
) -> None:
    """Write one segment's within-window block into ``out``.

    Rows ``row0 .. row0+n+k`` of ``out``; normal keys start at column
    ``normal_cols``, current ug keys at ``ug_cols``.
    """
    n = normal_len
    causal = np.tril(np.ones((n, n), dtype=bool))
    out[row0 : row0 + n, normal_cols : normal_cols + n] = causal
    for j in range(1, k + 1):
        r = row0 + n + j - 1
        lo, hi = ug_field(variant, j, ratio, n)
        out[r, normal_cols + lo - 1 : normal_cols + hi] = True
        if ug_causal:
            out[r, ug_cols : ug_cols + j] = True
        else:
            out[r, ug_cols + j - 1] = True


def segment_mask(
    layout: AttentionLayout, ratio: int | None, variant: str = "stepwise", ug_causal: bool = True
) -> Mask:
    _check_layout(layout, ratio, variant)
    L, n, k = layout.cache_len, layout.normal_len, layout.ug_len
    m = np.zeros((n + k, L + n + k), dtype=bool)
    m[:, :L] = True
    _fill_segment(m, 0, L, L + n, n, k, ratio, variant, ug_causal)
    return Mask(m, variant)


def stepwise_mask(layout: AttentionLayout, ratio: int | None, ug_causal: bool = True) -> Mask:
    return segment_mask(layout, ratio, "stepwise", ug_causal)


def segmentation_mask(layout: AttentionLayout, ratio: int | None, ug_causal: bool = True) -> Mask:
    return segment_mask(layout, ratio, "segmentation", ug_causal)


def full_coverage_mask(layout: AttentionLayout, ratio: int | None, ug_causal: bool = True) -> Mask:
    return segment_mask(layout, ratio, "full-coverage", ug_causal)


# --------------------------------------------------------------------------
# unified multi-segment layout


@dataclass(frozen=True)
class InterleavedLayout:
    """Slot metadata for ``[x_1.., ug_1.., x_2.., ug_2.., ...]``.

    Arrays have one entry per slot. ``source`` is the 0-based token index for
    normal slots and -1 for ug slots; ``ug_index`` is the 0-based position of
    a ug slot in the eventual cache and -1 for normal slots.
    """

    is_ug: np.ndarray
    segment: np.ndarray
    source: np.ndarray
    ug_index: np.ndarray
    segment_offsets: tuple[int, ...]  # first slot of each segment

    def __len__(self) -> int:
        return len(self.is_ug)


def interleave(plan: SegmentPlan) -> InterleavedLayout:
    is_ug, segment, source, ug_index, offsets = [], [], [], [], []
    ug_seen = 0
    for i, s in enumerate(plan.segments):
        offsets.append(len(is_ug))
        for p in range(s.start - 1, s.end):
            is_ug.append(False); segment.append(i); source.append(p); ug_index.append(-1)
        for j in range(s.k):
            is_ug.append(True); segment.append(i); source.append(-1); ug_index.append(ug_seen + j)
        ug_seen += s.k
    return InterleavedLayout(
        np.array(is_ug, dtype=bool),
        np.array(segment, dtype=np.int64),
        np.array(source, dtype=np.int64),
        np.array(ug_index, dtype=np.int64),
        tuple(offsets),
    )


def unified_training_mask(
    plan: SegmentPlan, variant: str = "stepwise", ug_causal: bool = True
) -> Mask:
    """Mask under which one pass over the interleaved sequence reproduces
    the serial segment-by-segment computation."""
    if variant not in VARIANTS:
        raise LayoutError(f"unknown mask variant {variant!r}")
    lay = interleave(plan)
    S = len(lay)
    m = np.zeros((S, S), dtype=bool)
    earlier_ug_cols: list[int] = []
    for i, s in enumerate(plan.segments):
        row0 = lay.segment_offsets[i]
        n, k = s.length, s.k
        if earlier_ug_cols:
            m[np.ix_(range(row0, row0 + n + k), earlier_ug_cols)] = True
        _fill_segment(m, row0, row0, row0 + n, n, k, s.ratio, variant, ug_causal)
        earlier_ug_cols.extend(range(row0 + n, row0 + n + k))
    return Mask(m, variant)
