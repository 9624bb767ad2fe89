"""Progressive compression engine.

A :class:`CompressedCache` holds, per layer, the pre-rotation keys and values
of every ug token emitted so far. Segments are compressed one at a time
against the cache and their ug states appended; raw tokens are dropped.
:class:`Session` keeps the uncompressed tail of the stream on top of a cache
and folds it into the cache whenever it fills a window.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .model import CompressionLM
from .numkernel import ContractError, token_nll
from .segmenter import RatioSampler, SegmentationError, SegmentPlan, validate_plan

CACHE_MAGIC = "UGCACHE1"


@dataclass(frozen=True)
class SegmentRecord:
    ratio: int
    k: int
    start: int  # 1-based, inclusive, in the compressed stream
    end: int


@dataclass
class CompressedCache:
    keys: list[torch.Tensor]  # per layer [B, L, D]
    values: list[torch.Tensor]
    log: list[SegmentRecord] = field(default_factory=list)
    total_source_tokens: int = 0
    # prediction for the token that follows the compressed text, [B, V]
    next_logits: torch.Tensor | None = None

    @classmethod
    def empty(cls, model: CompressionLM, batch: int = 1) -> "CompressedCache":
        cfg = model.cfg
        z = torch.zeros(batch, 0, cfg.dim, dtype=cfg.torch_dtype)
        return cls([z] * cfg.n_layers, [z] * cfg.n_layers)

    @property
    def length(self) -> int:
        return self.keys[0].shape[1]

    @property
    def batch(self) -> int:
        return self.keys[0].shape[0]

    def layers(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return list(zip(self.keys, self.values))

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "total_source_tokens": str(self.total_source_tokens),
            "layers": str(len(self.keys)),
            "segments": str(len(self.log)),
        }
        for i, r in enumerate(self.log):
            header[f"segment.{i}"] = f"{r.ratio},{r.k},{r.start},{r.end}"
        tensors = []
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            tensors.append(tensorio.StoredTensor(f"keys.{i}", k))
            tensors.append(tensorio.StoredTensor(f"values.{i}", v))
        if self.next_logits is not None:
            tensors.append(tensorio.StoredTensor("next_logits", self.next_logits))
        return tensorio.dumps(CACHE_MAGIC, header, tensors)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedCache":
        header, tensors = tensorio.loads(data, CACHE_MAGIC)
        named = {t.name: t.tensor for t in tensors}
        n_layers = int(header["layers"])
        log = []
        for i in range(int(header["segments"])):
            ratio, k, start, end = (int(x) for x in header[f"segment.{i}"].split(","))
            log.append(SegmentRecord(ratio, k, start, end))
        return cls(
            [named[f"keys.{i}"] for i in range(n_layers)],
            [named[f"values.{i}"] for i in range(n_layers)],
            log,
            int(header["total_source_tokens"]),
            named.get("next_logits"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "CompressedCache":
        return cls.from_bytes(Path(path).read_bytes())


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    return t.unsqueeze(0) if t.dim() == 1 else t


def compress_append(
    model: CompressionLM,
    cache: CompressedCache,
    segment_tokens,
    ratio: int,
    variant: str | None = None,
) -> CompressedCache:
    """Compress one segment against ``cache`` and return the extended cache.

    The input cache is left untouched; the result shares no storage with it.
    """
    tokens = _as_batch(segment_tokens)
    if tokens.shape[0] != cache.batch:
        raise ValueError(f"batch {tokens.shape[0]} does not match cache batch {cache.batch}")
    with torch.no_grad():
        out = model.forward_segment(tokens, ratio, cache.layers(), variant)
    n = tokens.shape[1]
    k = out.new_keys[0].shape[1]
    start = cache.total_source_tokens + 1
    return CompressedCache(
        [torch.cat([ck, nk_], dim=1) for ck, nk_ in zip(cache.keys, out.new_keys)],
        [torch.cat([cv, nv], dim=1) for cv, nv in zip(cache.values, out.new_values)],
        cache.log + [SegmentRecord(ratio, k, start, start + n - 1)],
        cache.total_source_tokens + n,
        out.logits[:, -1].clone(),
    )


def compress_context(
    model: CompressionLM,
    tokens,
    plan: SegmentPlan,
    variant: str | None = None,
    cache: CompressedCache | None = None,
) -> CompressedCache:
    """Compress a whole token stream segment by segment, following ``plan``."""
    tokens = _as_batch(tokens)
    if tokens.shape[1] == 0 or not plan.segments:
        raise SegmentationError("nothing to compress")
    if plan.total != tokens.shape[1]:
        raise ContractError(f"plan covers {plan.total} tokens, got {tokens.shape[1]}")
    validate_plan(plan)
    if cache is None:
        cache = CompressedCache.empty(model, tokens.shape[0])
    for seg in plan.segments:
        cache = compress_append(model, cache, tokens[:, seg.start - 1 : seg.end], seg.ratio, variant)
    return cache


class Session:
    """Decoding state: a compressed cache plus the raw tail of the stream.

    The tail never reaches the window size: once it does, it is compressed
    with a ratio drawn from ``sampler`` and emptied.
    """

    def __init__(
        self,
        model: CompressionLM,
        cache: CompressedCache | None = None,
        ratio: int | None = None,
        sampler: RatioSampler | None = None,
        variant: str | None = None,
        batch: int = 1,
    ) -> None:
        self.model = model
        self.cache = cache if cache is not None else CompressedCache.empty(model, batch)
        if sampler is None:
            default = ratio or (cache.log[-1].ratio if cache is not None and cache.log else 8)
            sampler = RatioSampler.monotonous(default)
        self.sampler = sampler
        self.variant = variant
        self.tail = torch.zeros(self.cache.batch, 0, dtype=torch.long)
        self.compressions = 0

    @property
    def window(self) -> int:
        return self.model.cfg.window

    def _tail_logits(self) -> torch.Tensor:
        with torch.no_grad():
            return self.model.forward_segment(self.tail, None, self.cache.layers()).logits

    def _next_logits(self) -> torch.Tensor | None:
        if self.tail.shape[1]:
            return self._tail_logits()[:, -1]
        return self.cache.next_logits

    def _maybe_compress(self) -> None:
        if self.tail.shape[1] >= self.window:
            (ratio,) = self.sampler.draw(1)
            self.cache = compress_append(self.model, self.cache, self.tail, ratio, self.variant)
            self.tail = self.tail[:, :0]
            self.compressions += 1

    def feed(self, tokens) -> None:
        """Append tokens to the stream without scoring them."""
        tokens = _as_batch(tokens)
        while tokens.shape[1]:
            room = self.window - self.tail.shape[1]
            self.tail = torch.cat([self.tail, tokens[:, :room]], dim=1)
            tokens = tokens[:, room:]
            self._maybe_compress()

    def score(self, tokens) -> torch.Tensor:
        """Teacher-forced NLL of each token given everything before it, [B, m]."""
        tokens = _as_batch(tokens)
        if tokens.shape[1] == 0:
            raise ContractError("empty continuation")
        if self.tail.shape[1] == 0 and self.cache.next_logits is None:
            raise ContractError("no context to predict the first continuation token from")
        out = []
        while tokens.shape[1]:
            room = self.window - self.tail.shape[1]
            chunk, tokens = tokens[:, :room], tokens[:, room:]
            before = self.tail.shape[1]
            prev = None if before else self.cache.next_logits
            self.tail = torch.cat([self.tail, chunk], dim=1)
            logits = self._tail_logits()
            preds = logits[:, max(before - 1, 0) : before + chunk.shape[1] - 1]
            if prev is not None:
                preds = torch.cat([prev.unsqueeze(1), preds], dim=1)
            out.append(token_nll(preds, chunk))
            self._maybe_compress()
        return torch.cat(out, dim=1)

    def generate(
        self,
        prompt,
        max_new: int,
        mode: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
    ) -> torch.Tensor:
        """Decode ``max_new`` tokens after ``prompt``; returns [B, max_new]."""
        if max_new < 1:
            raise ContractError("max_new must be >= 1")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        prompt = _as_batch(prompt)
        if prompt.shape[1]:
            self.feed(prompt)
        gen = torch.Generator().manual_seed(seed)
        produced = []
        byte_limit = self.model.cfg.ug_id
        for _ in range(max_new):
            logits = self._next_logits()
            if logits is None:
                raise ContractError("generation needs a prompt or a non-empty cache")
            logits = logits[:, :byte_limit]  # the ug id is never emitted
            if mode == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
            produced.append(nxt)
            self.feed(nxt.unsqueeze(1))
        return torch.stack(produced, dim=1)


def score_nll(model: CompressionLM, cache: CompressedCache, continuation, ratio: int | None = None) -> torch.Tensor:
    return Session(model, cache, ratio=ratio).score(continuation)


def generate(
    model: CompressionLM,
    cache: CompressedCache,
    prompt,
    max_new: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    ratio: int | None = None,
) -> torch.Tensor:
    return Session(model, cache, ratio=ratio).generate(prompt, max_new, mode, temperature, seed)
