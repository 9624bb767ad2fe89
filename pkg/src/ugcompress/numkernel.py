"""Dense tensor primitives with shape checks, FLOP instrumentation and a
finite-difference gradient checker.

Arrays are ``torch.Tensor`` (row-major, f32 or f64). Reverse-mode
differentiation is torch autograd; :func:`grad_check` is an independent
central-difference oracle for it.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import torch


class KernelError(ValueError):
    """Base class for numkernel contract violations."""


class ShapeError(KernelError):
    pass


class DegenerateRowError(KernelError):
    pass


class EmptyLossError(KernelError):
    pass


class NonFiniteError(KernelError):
    pass


class ContractError(KernelError):
    pass


# --------------------------------------------------------------------------
# FLOP instrumentation


class FlopCounter:
    """Accumulates matmul FLOPs (2*m*k*n per product) while active."""

    def __init__(self) -> None:
        self.total = 0
        self.calls = 0

    def add(self, flops: int) -> None:
        self.total += flops
        self.calls += 1


_active_counters: list[FlopCounter] = []


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _check_finite(out: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


# --------------------------------------------------------------------------
# ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product ``a @ b``.

    Leading batch dimensions broadcast as in ``torch.matmul``; the product of
    the broadcast batch extents multiplies the FLOP count.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    m, k = a.shape[-2], a.shape[-1]
    k2, n = b.shape[-2], b.shape[-1]
    if k != k2:
        raise ShapeError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ShapeError(f"batch extents do not broadcast: {tuple(a.shape)} @ {tuple(b.shape)}") from exc
    if _active_counters:
        flops = 2 * m * k * n * math.prod(batch)
        for counter in _active_counters:
            counter.add(flops)
    return _check_finite(torch.matmul(a, b), "matmul")


def masked_softmax_rows(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries get exactly zero probability. A row without any true entry
    is a contract violation rather than a silent zero row.
    """
    if mask.dtype != torch.bool:
        raise ShapeError("mask must be boolean")
    try:
        torch.broadcast_shapes(scores.shape, mask.shape)
    except RuntimeError as exc:
        raise ShapeError(f"mask {tuple(mask.shape)} does not fit scores {tuple(scores.shape)}") from exc
    if not bool(mask.any(dim=-1).all()):
        raise DegenerateRowError("attention row with no attendable entry")
    filled = scores.masked_fill(~mask, float("-inf"))
    # softmax subtracts the row max, which is taken over unmasked entries only
    return _check_finite(torch.softmax(filled, dim=-1), "masked_softmax_rows")


def cross_entropy_mean(
    logits: torch.Tensor, targets: torch.Tensor, include: torch.Tensor
) -> torch.Tensor:
    """Mean of -log p(target) over positions where ``include`` is true."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    tgt = targets.reshape(-1)
    inc = include.reshape(-1)
    if flat.shape[0] != tgt.shape[0] or tgt.shape != inc.shape:
        raise ShapeError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, "
            f"include {tuple(include.shape)} disagree"
        )
    if not bool(inc.any()):
        raise EmptyLossError("no position included in the loss")
    sel = tgt[inc]
    if bool(((sel < 0) | (sel >= V)).any()):
        raise ContractError(f"target id outside [0, {V})")
    logp = torch.log_softmax(flat[inc], dim=-1)
    nll = -logp.gather(1, sel.long().unsqueeze(1)).squeeze(1)
    return _check_finite(nll.mean(), "cross_entropy_mean")


def token_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood, same leading shape as targets."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)


def rms_normalize(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if x.shape[-1] != gain.shape[-1] or gain.dim() != 1:
        raise ShapeError(f"gain {tuple(gain.shape)} does not match last axis of {tuple(x.shape)}")
    denom = torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if eps == 0:
        # an all-zero slice would otherwise divide 0 by 0
        denom = torch.where(denom == 0, torch.ones_like(denom), denom)
    return _check_finite(x / denom * gain, "rms_normalize")


# --------------------------------------------------------------------------
# gradient checking


def _flattest(estimates: list[float]) -> float:
    if len(estimates) == 1:
        return estimates[0]
    gaps = [abs(b - a) for a, b in zip(estimates, estimates[1:])]
    spread = [gaps[0] * 2] + [gaps[j - 1] + gaps[j] for j in range(1, len(gaps))] + [gaps[-1] * 2]
    return estimates[min(range(len(estimates)), key=spread.__getitem__)]


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    generator: torch.Generator | None = None,
    order: int = 4,
    ladder: int = 8,
) -> float:
    """Worst relative error between autograd and central differences.

    ``fn`` is re-evaluated with each parameter coordinate nudged by +/-eps
    (and +/-2eps for the fourth-order stencil, the default). The wider step
    of the fourth-order stencil keeps float rounding well below 1e-5 even for
    gradients near 1e-6, which the plain two-point rule cannot do.

    With ``ladder > 1`` each coordinate is differentiated at steps
    ``eps * 2**i`` for ``i < ladder`` and the step whose estimate agrees best
    with its neighbours is kept. The choice uses only function values, never
    the autograd gradient, so it cannot hide a wrong derivative; it trades
    rounding noise (small steps) against truncation error (large steps)
    separately for each coordinate.
    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``. When
    ``max_coords`` is given, at most that many coordinates per parameter are
    probed, chosen with ``generator``.
    """
    if order not in (2, 4):
        raise ContractError(f"order must be 2 or 4, got {order}")
    for p in params:
        if p.dtype != torch.float64:
            raise ContractError("grad_check requires float64 parameters")
    for p in params:
        p.grad = None
    out = fn()
    if out.numel() != 1:
        raise ContractError(f"grad_check needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, list(params), allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = torch.randperm(n, generator=generator)[:max_coords].tolist()
            else:
                coords = range(n)
            for i in coords:
                orig = flat[i].item()

                def at(h: float) -> float:
                    flat[i] = orig + h
                    return fn().item()

                def central(h: float) -> float:
                    if order == 2:
                        return (at(h) - at(-h)) / (2 * h)
                    return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)

                numeric = _flattest([central(eps * 2**j) for j in range(max(ladder, 1))])
                flat[i] = orig
                a = analytic.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
