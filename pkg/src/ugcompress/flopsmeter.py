"""Matmul FLOP accounting for progressive and static compression.

Every count uses the ``2*m*k*n`` convention for an ``[m, k] @ [k, n]``
product. Softmax, norms, rotary rotation and other elementwise work are left
out, both here and in :func:`numkernel.count_flops`, so the two agree
exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import numkernel as nk
from .model import CompressionLM, ModelConfig
from .segmenter import partition, ug_count

FLOPS_HEADER = ("turn", "context_len", "progressive_flops", "static_flops")


@dataclass(frozen=True)
class CostConfig:
    dim: int
    n_layers: int
    n_heads: int
    mlp_dim: int
    vocab_size: int
    window: int
    ratio: int

    def __post_init__(self) -> None:
        for name in ("dim", "n_layers", "n_heads", "mlp_dim", "vocab_size", "window", "ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_model(cls, cfg: ModelConfig, ratio: int) -> "CostConfig":
        return cls(cfg.dim, cfg.n_layers, cfg.n_heads, cfg.mlp_dim, cfg.vocab_size, cfg.window, ratio)


@dataclass(frozen=True)
class TurnSchedule:
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.counts:
            raise ValueError("a schedule needs at least one turn")
        if any(c < 1 for c in self.counts):
            raise ValueError("every turn must add at least one token")

    @classmethod
    def constant(cls, turns: int, turn_len: int) -> "TurnSchedule":
        return cls((turn_len,) * turns)

    def __len__(self) -> int:
        return len(self.counts)


def flops_breakdown(cfg: CostConfig, q_len: int, kv_len: int, head_len: int | None = None) -> dict[str, int]:
    """Per-term FLOPs of one forward pass with ``q_len`` query rows over
    ``kv_len`` keys; the LM head runs on ``head_len`` rows (default all)."""
    D, M, L = cfg.dim, cfg.mlp_dim, cfg.n_layers
    head_len = q_len if head_len is None else head_len
    return {
        "projection": L * 3 * 2 * q_len * D * D,
        "score": L * 2 * q_len * D * kv_len,  # heads * q * head_dim * kv
        "value": L * 2 * q_len * kv_len * D,
        "output": L * 2 * q_len * D * D,
        "mlp": L * 3 * 2 * q_len * D * M,
        "lm_head": 2 * head_len * D * cfg.vocab_size,
    }


def flops_forward(cfg: CostConfig, q_len: int, kv_len: int, head_len: int | None = None) -> int:
    return sum(flops_breakdown(cfg, q_len, kv_len, head_len).values())


def segment_flops(cfg: CostConfig, n: int, cache_len: int) -> int:
    """Compressing one segment of ``n`` tokens against ``cache_len`` slots."""
    k = ug_count(n, cfg.ratio)
    return flops_forward(cfg, n + k, cache_len + n + k, head_len=n)


def _stream_cost(cfg: CostConfig, lengths: Iterable[int], cache_len: int = 0) -> tuple[int, int]:
    total = 0
    for n in lengths:
        total += segment_flops(cfg, n, cache_len)
        cache_len += ug_count(n, cfg.ratio)
    return total, cache_len


def _segment_lengths(t: int, w: int) -> list[int]:
    return [e - s + 1 for s, e in partition(t, w)]


def flops_progressive(cfg: CostConfig, schedule: TurnSchedule) -> list[int]:
    """Per-turn cost when each turn is compressed onto the running cache."""
    out, cache_len = [], 0
    for count in schedule.counts:
        cost, cache_len = _stream_cost(cfg, _segment_lengths(count, cfg.window), cache_len)
        out.append(cost)
    return out


def flops_static(cfg: CostConfig, schedule: TurnSchedule) -> list[int]:
    """Per-turn cost when every turn recompresses the full history from an
    empty cache."""
    out, history = [], 0
    for count in schedule.counts:
        history += count
        cost, _ = _stream_cost(cfg, _segment_lengths(history, cfg.window))
        out.append(cost)
    return out


def flops_table(cfg: CostConfig, schedule: TurnSchedule) -> list[dict[str, int]]:
    prog, stat = flops_progressive(cfg, schedule), flops_static(cfg, schedule)
    ctx = np.cumsum(schedule.counts)
    return [
        {"turn": i + 1, "context_len": int(c), "progressive_flops": p, "static_flops": s}
        for i, (c, p, s) in enumerate(zip(ctx, prog, stat))
    ]


def write_flops_csv(rows: Sequence[dict[str, int]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FLOPS_HEADER)
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# instrumented counterparts


def measure_progressive(model: CompressionLM, schedule: TurnSchedule, ratio: int, seed: int = 0) -> list[int]:
    """Run real compression turn by turn and count matmul FLOPs per turn."""
    from .compressor import CompressedCache, compress_append

    gen = torch.Generator().manual_seed(seed)
    cache = CompressedCache.empty(model)
    out = []
    for count in schedule.counts:
        tokens = torch.randint(0, 256, (1, count), generator=gen)
        with nk.count_flops() as fc:
            for s, e in partition(count, model.cfg.window):
                cache = compress_append(model, cache, tokens[:, s - 1 : e], ratio)
        out.append(fc.total)
    return out


def measure_static(model: CompressionLM, schedule: TurnSchedule, ratio: int, seed: int = 0) -> list[int]:
    from .compressor import compress_context
    from .segmenter import fixed_plan

    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, 256, (1, sum(schedule.counts)), generator=gen)
    out, history = [], 0
    for count in schedule.counts:
        history += count
        with nk.count_flops() as fc:
            compress_context(model, tokens[:, :history], fixed_plan(history, model.cfg.window, ratio))
        out.append(fc.total)
    return out


def relative_spread(values: Sequence[float]) -> float:
    """(max - min) / min, the drift measure for nominally constant series."""
    lo = min(values)
    return (max(values) - lo) / lo if lo else math.inf
