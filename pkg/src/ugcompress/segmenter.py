"""Window partitioning and per-segment compression ratios.

Token indices in plans are 1-based and inclusive, so a stream of ``t``
tokens with window ``w`` yields spans ``[(i-1)*w + 1, min(i*w, t)]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .seeding import make_rng

DEFAULT_RATIOS = (2, 4, 8, 16, 32)
SAMPLING_MODES = ("per-segment", "per-instance", "monotonous")


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    ratio: int
    k: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class SegmentPlan:
    window: int
    total: int
    segments: tuple[Segment, ...]

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def ug_total(self) -> int:
        return sum(s.k for s in self.segments)

    @property
    def ratios(self) -> list[int]:
        return [s.ratio for s in self.segments]

    def to_text(self) -> str:
        """One line per segment: ``start end ratio k``."""
        lines = [f"# window={self.window} total={self.total}"]
        lines += [f"{s.start} {s.end} {s.ratio} {s.k}" for s in self.segments]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SegmentPlan":
        header, *rows = [ln for ln in text.splitlines() if ln.strip()]
        meta = dict(item.split("=") for item in header.lstrip("#").split())
        segments = []
        for row in rows:
            start, end, ratio, k = (int(v) for v in row.split())
            segments.append(Segment(start, end, ratio, k))
        plan = cls(int(meta["window"]), int(meta["total"]), tuple(segments))
        validate_plan(plan)
        return plan


def ug_count(length: int, ratio: int) -> int:
    """Compression tokens for a span: ``ceil(length / ratio)``."""
    return -(-length // ratio)


def partition(t: int, w: int) -> list[tuple[int, int]]:
    if t < 1:
        raise SegmentationError("cannot partition an empty token stream")
    if w < 1:
        raise SegmentationError(f"window size must be positive, got {w}")
    n = math.ceil(t / w)
    return [((i - 1) * w + 1, min(i * w, t)) for i in range(1, n + 1)]


@dataclass
class RatioSampler:
    """Draws compression ratios for the segments of one sample.

    ``per-segment`` draws independently for each segment, ``per-instance``
    draws once per call to :meth:`draw`, and ``monotonous`` always returns
    ``fixed``.
    """

    candidates: Sequence[int] = DEFAULT_RATIOS
    mode: str = "per-segment"
    fixed: int | None = None
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in SAMPLING_MODES:
            raise SegmentationError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "monotonous":
            if self.fixed is None or self.fixed < 1:
                raise SegmentationError("monotonous sampling needs a fixed ratio >= 1")
        else:
            if not self.candidates or min(self.candidates) < 1:
                raise SegmentationError("candidate ratios must be nonempty and >= 1")
        self.candidates = tuple(int(c) for c in self.candidates)
        self._rng = make_rng(self.seed, f"ratio-sampler/{self.mode}")

    @classmethod
    def monotonous(cls, ratio: int) -> "RatioSampler":
        return cls(candidates=(ratio,), mode="monotonous", fixed=ratio)

    def draw(self, n_segments: int) -> list[int]:
        if self.mode == "monotonous":
            return [int(self.fixed)] * n_segments
        cands = np.asarray(self.candidates)
        if self.mode == "per-instance":
            return [int(cands[self._rng.integers(len(cands))])] * n_segments
        return [int(c) for c in cands[self._rng.integers(len(cands), size=n_segments)]]


def assign_ratios(
    spans: Sequence[tuple[int, int]], sampler: RatioSampler, window: int | None = None
) -> SegmentPlan:
    spans = list(spans)
    if not spans:
        raise SegmentationError("no segments to assign")
    ratios = sampler.draw(len(spans))
    segments = tuple(
        Segment(s, e, r, ug_count(e - s + 1, r)) for (s, e), r in zip(spans, ratios)
    )
    if window is None:
        window = spans[0][1] - spans[0][0] + 1
    return SegmentPlan(window, spans[-1][1], segments)


def make_plan(t: int, w: int, sampler: RatioSampler) -> SegmentPlan:
    return assign_ratios(partition(t, w), sampler, window=w)


def fixed_plan(t: int, w: int, ratio: int | Sequence[int]) -> SegmentPlan:
    """Plan with explicitly given ratios (one int for all segments, or a list)."""
    spans = partition(t, w)
    ratios = [ratio] * len(spans) if isinstance(ratio, int) else list(ratio)
    if len(ratios) != len(spans):
        raise SegmentationError(f"{len(ratios)} ratios for {len(spans)} segments")
    segments = tuple(Segment(s, e, r, ug_count(e - s + 1, r)) for (s, e), r in zip(spans, ratios))
    return SegmentPlan(w, t, segments)


def concat_plans(*plans: SegmentPlan) -> SegmentPlan:
    """Join plans over consecutive token streams (turn-aligned segmentation)."""
    offset = 0
    segments = []
    for plan in plans:
        for s in plan.segments:
            segments.append(Segment(s.start + offset, s.end + offset, s.ratio, s.k))
        offset += plan.total
    return SegmentPlan(max(p.window for p in plans), offset, tuple(segments))


def validate_plan(plan: SegmentPlan) -> None:
    expected = 1
    for s in plan.segments:
        if s.start != expected or s.end < s.start:
            raise SegmentationError(f"segment {s} breaks contiguous tiling")
        if s.length > plan.window:
            raise SegmentationError(f"segment {s} longer than window {plan.window}")
        if s.ratio < 1 or s.k != ug_count(s.length, s.ratio):
            raise SegmentationError(f"segment {s} has inconsistent ratio/k")
        expected = s.end + 1
    if expected - 1 != plan.total:
        raise SegmentationError(f"plan covers {expected - 1} tokens, expected {plan.total}")
