"""Training of the compression parameters.

Only the ug projections and the shared ug embedding receive updates; the
base transformer is frozen. Two objectives are available:

* ``compression-lm``: next-token loss over every token outside the first
  segment, each conditioned on the ug states of all earlier segments plus
  its own segment's raw prefix. Computed in one interleaved pass.
* ``encode-decode``: compress an input once and score only a target.

Targets are shifted in the usual decoder way: the logits at a normal slot
predict the following token, so the first token of segment ``i`` is
predicted from the last normal slot of segment ``i-1``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from . import numkernel as nk
from .model import CompressionLM, init_ug_params
from .segmenter import (
    DEFAULT_RATIOS,
    RatioSampler,
    SegmentPlan,
    concat_plans,
    fixed_plan,
    make_plan,
)
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

OBJECTIVES = ("compression-lm", "encode-decode")
PHASES = ("pretrain-analog", "finetune-analog")
METRICS_HEADER = ("step", "phase", "train_loss", "val_ppl", "lr", "objective")


class NoSupervisionError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class Corpus(Protocol):
    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray: ...


@dataclass
class TrainConfig:
    objective: str = "compression-lm"
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 16
    sampling: str = "per-segment"
    ratios: tuple[int, ...] = DEFAULT_RATIOS
    fixed_ratio: int = 4
    mask_variant: str | None = None
    seed: int = 0
    val_every: int = 50
    val_samples: int = 32
    val_ratio: int = 8
    phase: str = "finetune-analog"
    grad_clip: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        self.ratios = tuple(int(r) for r in self.ratios)

    def sampler(self, name: str = "train") -> RatioSampler:
        return RatioSampler(
            candidates=self.ratios,
            mode=self.sampling,
            fixed=self.fixed_ratio if self.sampling == "monotonous" else None,
            seed=derive_seed(self.seed, name),
        )


# --------------------------------------------------------------------------
# objectives


def _supervised_loss(
    model: CompressionLM,
    tokens: torch.Tensor,
    plans: Sequence[SegmentPlan],
    first_target: Sequence[int],
    variant: str | None,
    reduction: str = "mean",
) -> tuple[torch.Tensor, int]:
    """NLL over targets at source index >= ``first_target[b]`` in sample b."""
    out = model.forward_interleaved(list(tokens), list(plans), variant)
    lengths = torch.tensor([p.total for p in plans])
    nxt = out.source_index + 1
    valid = nxt < lengths[out.batch_index]
    floor = torch.as_tensor(list(first_target))[out.batch_index]
    include = valid & (nxt >= floor)
    safe = torch.where(valid, nxt, torch.zeros_like(nxt))
    targets = tokens[out.batch_index, safe]
    if reduction == "sum":
        if not bool(include.any()):
            raise nk.EmptyLossError("no position included in the loss")
        nll = nk.token_nll(out.logits[include], targets[include])
        return nll.sum(), int(include.sum())
    return nk.cross_entropy_mean(out.logits, targets, include), int(include.sum())


def compression_lm_loss(
    model: CompressionLM,
    tokens,
    plans: SegmentPlan | Sequence[SegmentPlan],
    variant: str | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Mean NLL of every token outside the first segment (one unified pass)."""
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if isinstance(plans, SegmentPlan):
        plans = [plans] * tokens.shape[0]
    for p in plans:
        if len(p.segments) < 2:
            raise NoSupervisionError("a single-segment sample leaves nothing to supervise")
    first = [p.segments[0].length for p in plans]
    loss, _ = _supervised_loss(model, tokens, plans, first, variant, reduction)
    return loss


def encode_decode_plan(n_input: int, n_target: int, window: int, ratio: int) -> SegmentPlan:
    return concat_plans(fixed_plan(n_input, window, ratio), fixed_plan(n_target, window, ratio))


def encode_decode_loss(
    model: CompressionLM,
    inputs,
    targets,
    ratio: int | Sequence[int],
    variant: str | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Mean NLL of ``targets`` given the compressed ``inputs`` only."""
    inputs = torch.as_tensor(np.asarray(inputs), dtype=torch.long)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if inputs.dim() == 1:
        inputs, targets = inputs.unsqueeze(0), targets.unsqueeze(0)
    if inputs.shape[1] == 0:
        raise nk.ContractError("empty input")
    if targets.shape[1] == 0:
        raise nk.ContractError("empty target")
    B, n_in = inputs.shape
    ratios = [ratio] * B if isinstance(ratio, int) else list(ratio)
    w = model.cfg.window
    plans = [encode_decode_plan(n_in, targets.shape[1], w, r) for r in ratios]
    tokens = torch.cat([inputs, targets], dim=1)
    # the last input slot predicts the first target token
    loss, _ = _supervised_loss(model, tokens, plans, [n_in] * B, variant, reduction)
    return loss


def supervised_count(objective: str, n_input: int, n_target: int, window: int) -> int:
    """Targets one (input, target) pair contributes under ``objective``."""
    if objective == "compression-lm":
        total = n_input + n_target
        return total - min(window, total)
    if objective == "encode-decode":
        return n_target
    raise ValueError(f"unknown objective {objective!r}")


# --------------------------------------------------------------------------
# validation


def validation_ppl(
    model: CompressionLM,
    samples: np.ndarray,
    ratio: int,
    variant: str | None = None,
    batch_size: int = 32,
) -> float:
    """exp(mean NLL) over all tokens after the first segment."""
    w = model.cfg.window
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = torch.as_tensor(samples[i : i + batch_size])
            plans = [fixed_plan(chunk.shape[1], w, ratio)] * chunk.shape[0]
            s = compression_lm_loss(model, chunk, plans, variant, reduction="sum")
            total += float(s)
            count += chunk.shape[0] * (chunk.shape[1] - min(w, chunk.shape[1]))
    return math.exp(total / count)


# --------------------------------------------------------------------------
# training loops


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in METRICS_HEADER})

    def curve(self, phase: str | None = None) -> list[tuple[int, float]]:
        return [
            (int(r["step"]), float(r["val_ppl"]))
            for r in self.rows
            if r["val_ppl"] != "" and (phase is None or r["phase"] == phase)
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _linear_decay(base_lr: float, step: int, steps: int) -> float:
    return base_lr * (1.0 - step / steps)


def _batch_loss(model, batch: torch.Tensor, cfg: TrainConfig, sampler: RatioSampler) -> torch.Tensor:
    w = model.cfg.window
    T = batch.shape[1]
    if cfg.objective == "compression-lm":
        plans = [make_plan(T, w, sampler) for _ in range(batch.shape[0])]
        return compression_lm_loss(model, batch, plans, cfg.mask_variant)
    n_target = T - (math.ceil(T / w) - 1) * w
    ratios = [sampler.draw(1)[0] for _ in range(batch.shape[0])]
    return encode_decode_loss(model, batch[:, :-n_target], batch[:, -n_target:], ratios, cfg.mask_variant)


def train(
    model: CompressionLM,
    corpus: Corpus,
    cfg: TrainConfig,
    val_samples: np.ndarray | None = None,
    metrics: MetricsLog | None = None,
    step_offset: int = 0,
) -> MetricsLog:
    """Optimize the ug parameters on ``corpus`` and return the metrics log.

    Batches, ratio draws and validation samples are pure functions of
    ``cfg.seed``.
    """
    metrics = metrics if metrics is not None else MetricsLog()
    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    model.set_trainable(base=False, ug=True)
    params = [p for p in model.ug_parameters().values()]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    data_rng = make_rng(cfg.seed, "train-batches")
    sampler = cfg.sampler()
    if val_samples is None and cfg.val_samples:
        val_samples = corpus.sample(make_rng(cfg.seed, "validation"), cfg.val_samples)

    def validate(step: int, train_loss) -> None:
        ppl = ""
        if val_samples is not None:
            try:
                ppl = validation_ppl(model, val_samples, cfg.val_ratio, cfg.mask_variant)
            except nk.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite activations in validation at step {step}: {exc}") from exc
        lr = _linear_decay(cfg.lr, min(step - step_offset, cfg.steps), cfg.steps)
        metrics.add(step=step, phase=cfg.phase, train_loss=train_loss, val_ppl=ppl, lr=lr, objective=cfg.objective)
        log.info("step %d loss %s val_ppl %s", step, train_loss, ppl)

    validate(step_offset, "")
    running: list[float] = []
    for step in range(cfg.steps):
        lr = _linear_decay(cfg.lr, step, cfg.steps)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = torch.as_tensor(corpus.sample(data_rng, cfg.batch_size))
        try:
            loss = _batch_loss(model, batch, cfg, sampler)
        except nk.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite activations at step {step}: {exc}") from exc
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        running.append(loss.item())
        done = step + 1
        if cfg.val_every and (done % cfg.val_every == 0 or done == cfg.steps):
            validate(step_offset + done, sum(running) / len(running))
            running = []
    return metrics


def pretrain_base(
    model: CompressionLM,
    corpus: Corpus,
    steps: int,
    lr: float = 2e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Plain causal-LM training of the base weights, standing in for a
    pretrained backbone. Re-initializes the ug parameters from the result.

    The rate warms up over 50 steps, holds, then cools down linearly over
    the last fifth. Holding it matters: in-context copying tends to appear
    abruptly a few hundred steps in, and a decaying rate delays that.
    """
    torch.manual_seed(derive_seed(seed, "pretrain-torch"))
    model.set_trainable(base=True, ug=False)
    params = list(model.base_parameters().values())
    opt = torch.optim.Adam(params, lr=lr)
    rng = make_rng(seed, "pretrain-batches")
    losses = []
    cooldown = max(1, steps // 5)
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = lr * min(1.0, (step + 1) / 50, (steps - step) / cooldown)
        batch = torch.as_tensor(corpus.sample(rng, batch_size))
        logits = model.forward_plain(batch[:, :-1])
        loss = nk.cross_entropy_mean(logits, batch[:, 1:], torch.ones_like(batch[:, 1:], dtype=torch.bool))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        losses.append(loss.item())
    init_ug_params(model)
    return losses


# --------------------------------------------------------------------------
# freeze audit


@dataclass
class FreezeReport:
    checked: int
    drifted: list[str]

    @property
    def ok(self) -> bool:
        return not self.drifted


def snapshot(model: CompressionLM, which: str = "base") -> dict[str, torch.Tensor]:
    params = model.base_parameters() if which == "base" else model.ug_parameters()
    return {n: p.detach().clone() for n, p in params.items()}


def freeze_audit(before: dict[str, torch.Tensor], after: dict[str, torch.Tensor] | CompressionLM) -> FreezeReport:
    """Compare frozen tensors byte for byte."""
    if isinstance(after, CompressionLM):
        after = snapshot(after, "base")
    drifted = []
    for name, t in before.items():
        other = after.get(name)
        if other is None or other.shape != t.shape or other.dtype != t.dtype:
            drifted.append(name)
        elif t.numpy().tobytes() != other.numpy().tobytes():
            drifted.append(name)
    return FreezeReport(len(before), drifted)
