"""Decoder-only transformer with a second projection path for compression
(ug) tokens.

Blocks are pre-norm (RMS norm), rotary attention and a gated SiLU MLP with an
untied output head. Every attention layer owns two projection sets: the
frozen base ``w*_nt`` used by normal tokens and the trainable ``w*_ug`` used
by ug tokens. The MLP and norms are shared by both streams.

Weights are stored ``[in, out]`` and applied as ``x @ W``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import numkernel as nk
from . import tensorio
from .maskgen import (
    VARIANTS,
    AttentionLayout,
    LayoutError,
    interleave,
    segment_mask,
    unified_training_mask,
)
from .segmenter import SegmentPlan, ug_count

CKPT_MAGIC = "UGCKPT1"
BASE_PROJ = ("wq_nt", "wk_nt", "wv_nt", "wo_nt")
UG_PROJ = ("wq_ug", "wk_ug", "wv_ug", "wo_ug")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class WindowOverflowError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_dim: int = 256
    vocab_size: int = 257  # 256 byte ids + the ug id
    window: int = 32
    mask_variant: str = "stepwise"
    ug_causal: bool = True
    dtype: str = "float32"
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self) -> None:
        for name in ("dim", "n_layers", "n_heads", "mlp_dim", "vocab_size", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        if (self.dim // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary embedding")
        if self.mask_variant not in VARIANTS:
            raise ValueError(f"unknown mask variant {self.mask_variant!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def ug_id(self) -> int:
        return self.vocab_size - 1

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_header(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            raw = header.get(f"model.{f.name}")
            if raw is None:
                continue
            if f.type in ("bool", bool):
                kwargs[f.name] = raw == "True"
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def positions_for(layout: AttentionLayout, ratio: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Rotary positions for one segment.

    Returns ``(key_positions, query_positions)``. Cache slots take
    ``0..L_ca-1``, normal tokens ``L_ca..L_ca+n-1`` and current ug token
    ``j`` the position of the last normal token in its stepwise field.
    """
    L, n, k = layout.cache_len, layout.normal_len, layout.ug_len
    normal = L + np.arange(n)
    if k:
        ug = L + np.minimum(np.arange(1, k + 1) * ratio, n) - 1
    else:
        ug = np.zeros(0, dtype=np.int64)
    keys = np.concatenate([np.arange(L), normal, ug]).astype(np.int64)
    queries = np.concatenate([normal, ug]).astype(np.int64)
    return keys, queries


def rope(x: torch.Tensor, pos: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate-half rotary embedding; ``x`` is [..., S, hd], ``pos`` broadcasts to [..., S]."""
    hd = x.shape[-1]
    inv = theta ** (-torch.arange(0, hd, 2, dtype=x.dtype) / hd)
    ang = pos.to(x.dtype).unsqueeze(-1) * inv
    cos = torch.cat([ang.cos(), ang.cos()], dim=-1)
    sin = torch.cat([ang.sin(), ang.sin()], dim=-1)
    x1, x2 = x[..., : hd // 2], x[..., hd // 2 :]
    rotated = torch.cat([-x2, x1], dim=-1)
    return x * cos + rotated * sin


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        D, F = cfg.dim, cfg.mlp_dim
        self.attn_norm = nn.Parameter(torch.ones(D))
        for name in BASE_PROJ + UG_PROJ:
            setattr(self, name, nn.Parameter(torch.empty(D, D)))
        self.mlp_norm = nn.Parameter(torch.ones(D))
        self.w_gate = nn.Parameter(torch.empty(D, F))
        self.w_up = nn.Parameter(torch.empty(D, F))
        self.w_down = nn.Parameter(torch.empty(F, D))


@dataclass
class SegmentOutput:
    logits: torch.Tensor | None  # [B, n, V]
    new_keys: list[torch.Tensor]  # per layer [B, k, D], pre-rotation
    new_values: list[torch.Tensor]


@dataclass
class InterleavedOutput:
    logits: torch.Tensor  # [M, V], one row per normal slot
    batch_index: torch.Tensor  # [M]
    source_index: torch.Tensor  # [M] 0-based token index within its sample
    ug_keys: list[torch.Tensor]  # per layer [U, D], ug slots in (sample, cache) order
    ug_values: list[torch.Tensor]


class CompressionLM(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        D, V = cfg.dim, cfg.vocab_size
        self.tok_embedding = nn.Parameter(torch.empty(V, D))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.Parameter(torch.ones(D))
        self.lm_head = nn.Parameter(torch.empty(D, V))
        self.ug_embedding = nn.Parameter(torch.zeros(D))
        self._init_weights(seed)
        self.to(cfg.torch_dtype)
        init_ug_params(self)

    def _init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() == 2:
                    p.copy_(torch.randn(p.shape, generator=g) * self.cfg.init_std)

    # ------------------------------------------------------------------
    # parameter groups

    def base_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not is_ug_param(n)}

    def ug_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if is_ug_param(n)}

    def set_trainable(self, base: bool, ug: bool) -> None:
        for n, p in self.named_parameters():
            p.requires_grad_(ug if is_ug_param(n) else base)

    # ------------------------------------------------------------------
    # building blocks

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, S, _ = x.shape
        return x.view(B, S, self.cfg.n_heads, self.cfg.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        B, H, S, hd = x.shape
        return x.transpose(1, 2).reshape(B, S, H * hd)

    def _mlp(self, layer: DecoderLayer, x: torch.Tensor) -> torch.Tensor:
        h = nk.rms_normalize(x, layer.mlp_norm, self.cfg.norm_eps)
        gated = torch.nn.functional.silu(nk.matmul(h, layer.w_gate)) * nk.matmul(h, layer.w_up)
        return x + nk.matmul(gated, layer.w_down)

    def _logits(self, h: torch.Tensor) -> torch.Tensor:
        return nk.matmul(nk.rms_normalize(h, self.final_norm, self.cfg.norm_eps), self.lm_head)

    def _embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if bool((tokens < 0).any()) or bool((tokens >= self.cfg.ug_id).any()):
            raise ValueError("token ids must lie in [0, ug_id)")
        return self.tok_embedding[tokens]

    # ------------------------------------------------------------------
    # serial (one segment against a cache)

    def layer_forward(
        self,
        idx: int,
        h_nt: torch.Tensor,
        h_ug: torch.Tensor,
        cache_k: torch.Tensor,
        cache_v: torch.Tensor,
        mask: torch.Tensor,
        key_pos: torch.Tensor,
        query_pos: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """One block for a segment: returns ``(h_nt', h_ug', K_ug, V_ug)``.

        ``h_nt`` is [B, n, D], ``h_ug`` [B, k, D], the cache [B, L, D].
        ``K_ug``/``V_ug`` are returned before rotation, ready for caching.
        """
        layer = self.layers[idx]
        n, k, L = h_nt.shape[1], h_ug.shape[1], cache_k.shape[1]
        if mask.shape != (n + k, L + n + k):
            raise LayoutError(f"mask {tuple(mask.shape)} does not fit n={n}, k={k}, L={L}")
        theta = self.cfg.rope_theta
        a_nt = nk.rms_normalize(h_nt, layer.attn_norm, self.cfg.norm_eps)
        a_ug = nk.rms_normalize(h_ug, layer.attn_norm, self.cfg.norm_eps)
        q = torch.cat([nk.matmul(a_nt, layer.wq_nt), nk.matmul(a_ug, layer.wq_ug)], dim=1)
        k_ug = nk.matmul(a_ug, layer.wk_ug)
        v_ug = nk.matmul(a_ug, layer.wv_ug)
        keys = torch.cat([cache_k, nk.matmul(a_nt, layer.wk_nt), k_ug], dim=1)
        values = torch.cat([cache_v, nk.matmul(a_nt, layer.wv_nt), v_ug], dim=1)

        qh = rope(self._heads(q), query_pos, theta)
        kh = rope(self._heads(keys), key_pos, theta)
        scores = nk.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(self.cfg.head_dim)
        probs = nk.masked_softmax_rows(scores, mask)
        attn = self._merge(nk.matmul(probs, self._heads(values)))
        o_nt = nk.matmul(attn[:, :n], layer.wo_nt)
        o_ug = nk.matmul(attn[:, n:], layer.wo_ug)
        h_nt = self._mlp(layer, h_nt + o_nt)
        h_ug = self._mlp(layer, h_ug + o_ug)
        return h_nt, h_ug, k_ug, v_ug

    def forward_segment(
        self,
        tokens: torch.Tensor,
        ratio: int | None,
        cache: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
        variant: str | None = None,
        need_logits: bool = True,
        check_window: bool = True,
    ) -> SegmentOutput:
        """Run one segment (``tokens`` [B, n]) against an optional cache.

        With ``ratio=None`` no ug tokens are appended. ``cache`` is one
        ``(K, V)`` pair per layer, each [B, L, D], pre-rotation.
        """
        cfg = self.cfg
        variant = variant or cfg.mask_variant
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        B, n = tokens.shape
        if n == 0:
            raise ValueError("empty segment")
        if check_window and n > cfg.window:
            raise WindowOverflowError(f"segment of {n} tokens exceeds window {cfg.window}")
        k = ug_count(n, ratio) if ratio else 0
        if cache is None:
            empty = torch.zeros(B, 0, cfg.dim, dtype=cfg.torch_dtype)
            cache = [(empty, empty)] * cfg.n_layers
        if len(cache) != cfg.n_layers:
            raise ValueError(f"cache has {len(cache)} layers, model has {cfg.n_layers}")
        L = cache[0][0].shape[1]
        layout = AttentionLayout(L, n, k)
        mask = torch.from_numpy(segment_mask(layout, ratio, variant, cfg.ug_causal).matrix)
        kp, qp = positions_for(layout, ratio)
        key_pos, query_pos = torch.from_numpy(kp), torch.from_numpy(qp)

        h_nt = self._embed(tokens)
        h_ug = self.ug_embedding.expand(B, k, cfg.dim)
        new_k, new_v = [], []
        for i in range(cfg.n_layers):
            ck, cv = cache[i]
            h_nt, h_ug, k_ug, v_ug = self.layer_forward(i, h_nt, h_ug, ck, cv, mask, key_pos, query_pos)
            new_k.append(k_ug)
            new_v.append(v_ug)
        logits = self._logits(h_nt) if need_logits else None
        return SegmentOutput(logits, new_k, new_v)

    def forward_plain(self, tokens: torch.Tensor) -> torch.Tensor:
        """Plain causal LM over raw tokens, no compression, no window limit."""
        return self.forward_segment(tokens, None, check_window=False).logits

    # ------------------------------------------------------------------
    # unified (all segments of a sample in one pass)

    def forward_interleaved(
        self,
        tokens: list[torch.Tensor] | torch.Tensor,
        plans: list[SegmentPlan],
        variant: str | None = None,
    ) -> InterleavedOutput:
        """One pass over ``[x_1.., ug_1.., x_2.., ug_2.., ...]`` per sample.

        Mathematically identical to running :meth:`forward_segment` segment
        by segment while caching ug keys/values. A ug key is rotated with its
        in-window position when queried from its own segment and with its
        cache index when queried from later segments.
        """
        cfg = self.cfg
        variant = variant or cfg.mask_variant
        B = len(plans)
        lays = [interleave(p) for p in plans]
        S = max(len(l) for l in lays)
        ids = np.zeros((B, S), dtype=np.int64)
        is_ug = np.zeros((B, S), dtype=bool)
        is_pad = np.ones((B, S), dtype=bool)
        qpos = np.zeros((B, S), dtype=np.int64)
        cpos = np.zeros((B, S), dtype=np.int64)
        mask = np.zeros((B, S, S), dtype=bool)
        cross = np.zeros((B, S, S), dtype=bool)
        for b, (plan, lay) in enumerate(zip(plans, lays)):
            toks = tokens[b]
            toks = toks.numpy() if isinstance(toks, torch.Tensor) else np.asarray(toks)
            if len(toks) != plan.total:
                raise ValueError(f"sample {b}: {len(toks)} tokens but plan covers {plan.total}")
            s = len(lay)
            is_pad[b, :s] = False
            is_ug[b, :s] = lay.is_ug
            ids[b, :s][~lay.is_ug] = toks[lay.source[~lay.is_ug]]
            cpos[b, :s] = np.maximum(lay.ug_index, 0)
            cache_len = 0
            for i, seg in enumerate(plan.segments):
                o = lay.segment_offsets[i]
                layout = AttentionLayout(cache_len, seg.length, seg.k)
                _, q = positions_for(layout, seg.ratio)
                qpos[b, o : o + seg.length + seg.k] = q
                cache_len += seg.k
            mask[b, :s, :s] = unified_training_mask(plan, variant, cfg.ug_causal).matrix
            seg_idx = lay.segment
            cross[b, :s, :s] = lay.is_ug[None, :] & (seg_idx[None, :] < seg_idx[:, None])
            pad = np.arange(s, S)
            mask[b, pad, pad] = True

        ids_t = torch.from_numpy(ids)
        ug_t = torch.from_numpy(is_ug)
        flat_ug = ug_t.reshape(-1)
        ug_idx = torch.nonzero(flat_ug).squeeze(1)
        nt_idx = torch.nonzero(~flat_ug).squeeze(1)
        real_nt = torch.nonzero((~flat_ug) & ~torch.from_numpy(is_pad).reshape(-1)).squeeze(1)
        mask_t = torch.from_numpy(mask).unsqueeze(1)
        cross_t = torch.from_numpy(cross).unsqueeze(1)
        qpos_t = torch.from_numpy(qpos).unsqueeze(1)
        cpos_t = torch.from_numpy(cpos).unsqueeze(1)
        any_cross = bool(cross.any())

        if bool((ids_t < 0).any()) or bool((ids_t >= cfg.ug_id).any()):
            raise ValueError("token ids must lie in [0, ug_id)")
        emb = self.tok_embedding[ids_t]
        h = torch.where(ug_t.unsqueeze(-1), self.ug_embedding.expand_as(emb), emb)

        def route(x: torch.Tensor, w_nt: torch.Tensor, w_ug: torch.Tensor) -> torch.Tensor:
            flat = x.reshape(B * S, -1)
            out = flat.new_zeros(B * S, w_nt.shape[1])
            out = out.index_copy(0, nt_idx, nk.matmul(flat[nt_idx], w_nt))
            if len(ug_idx):
                out = out.index_copy(0, ug_idx, nk.matmul(flat[ug_idx], w_ug))
            return out.view(B, S, -1)

        theta = cfg.rope_theta
        scale = 1.0 / math.sqrt(cfg.head_dim)
        ug_keys, ug_values = [], []
        for layer in self.layers:
            a = nk.rms_normalize(h, layer.attn_norm, cfg.norm_eps)
            q = route(a, layer.wq_nt, layer.wq_ug)
            k = route(a, layer.wk_nt, layer.wk_ug)
            v = route(a, layer.wv_nt, layer.wv_ug)
            ug_keys.append(k.reshape(B * S, -1)[ug_idx])
            ug_values.append(v.reshape(B * S, -1)[ug_idx])
            qh = rope(self._heads(q), qpos_t, theta)
            kh = self._heads(k)
            scores = nk.matmul(qh, rope(kh, qpos_t, theta).transpose(-1, -2))
            if any_cross:
                as_cache = nk.matmul(qh, rope(kh, cpos_t, theta).transpose(-1, -2))
                scores = torch.where(cross_t, as_cache, scores)
            probs = nk.masked_softmax_rows(scores * scale, mask_t)
            attn = self._merge(nk.matmul(probs, self._heads(v)))
            h = self._mlp(layer, h + route(attn, layer.wo_nt, layer.wo_ug))

        flat_h = h.reshape(B * S, -1)[real_nt]
        logits = self._logits(flat_h)
        batch_index = real_nt // S
        src = np.full((B, S), -1, dtype=np.int64)
        for b, lay in enumerate(lays):
            src[b, : len(lay)] = lay.source
        source_index = torch.from_numpy(src).reshape(-1)[real_nt]
        return InterleavedOutput(logits, batch_index, source_index, ug_keys, ug_values)


def is_ug_param(name: str) -> bool:
    return name == "ug_embedding" or name.rsplit(".", 1)[-1] in UG_PROJ


def init_ug_params(model: CompressionLM) -> CompressionLM:
    """Copy every base attention projection into its ug twin, set the shared
    ug embedding to the mean token embedding, and freeze the base."""
    with torch.no_grad():
        for layer in model.layers:
            for nt, ug in zip(BASE_PROJ, UG_PROJ):
                getattr(layer, ug).copy_(getattr(layer, nt))
        model.ug_embedding.copy_(model.tok_embedding.mean(dim=0))
    model.set_trainable(base=False, ug=True)
    return model


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CompressionLM, path, extra: dict[str, str] | None = None) -> None:
    header = model.cfg.to_header()
    header.update(extra or {})
    tensors = [
        tensorio.StoredTensor(n, p.detach(), is_ug_param(n)) for n, p in model.named_parameters()
    ]
    tensorio.save(path, CKPT_MAGIC, header, tensors)


def load_checkpoint(path: str | Path) -> tuple[CompressionLM, dict[str, str]]:
    header, tensors = tensorio.load(path, CKPT_MAGIC)
    cfg = ModelConfig.from_header(header)
    model = CompressionLM(cfg)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for st in tensors:
            if st.name not in params:
                raise tensorio.FormatError(f"unknown tensor {st.name}")
            params[st.name].copy_(st.tensor)
    for st in tensors:
        params[st.name].requires_grad_(st.trainable)
    return model, header
