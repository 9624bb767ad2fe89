"""Quick internal consistency checks behind ``ugcompress selftest``."""
from __future__ import annotations

import itertools
from typing import Callable

import numpy as np
import torch

from . import numkernel as nk
from .compressor import compress_context
from .maskgen import VARIANTS, AttentionLayout, segment_mask
from .model import CompressionLM, ModelConfig
from .segmenter import fixed_plan, ug_count
from .trainer import compression_lm_loss


def _attends(variant: str, L: int, n: int, ratio: int, row: int, col: int) -> bool:
    if col < L:
        return True
    if row < n:
        return col - L <= row and col < L + n
    j = row - n + 1
    if col >= L + n:
        return col - L - n + 1 <= j
    p = col - L + 1
    hi = min(j * ratio, n)
    if variant == "stepwise":
        return p <= hi
    if variant == "segmentation":
        return (j - 1) * ratio < p <= hi
    return True


def check_masks() -> bool:
    for variant, n, ratio, L in itertools.product(VARIANTS, range(1, 17), (2, 4, 8, 16), (0, 3)):
        k = ug_count(n, ratio)
        got = segment_mask(AttentionLayout(L, n, k), ratio, variant).matrix
        ref = np.array([[_attends(variant, L, n, ratio, r, c) for c in range(L + n + k)] for r in range(n + k)])
        if not np.array_equal(got, ref):
            return False
    return True


def _tiny(seed: int) -> CompressionLM:
    cfg = ModelConfig(dim=16, n_layers=2, n_heads=2, mlp_dim=24, window=8, dtype="float64")
    model = CompressionLM(cfg, seed=seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.ug_parameters().values():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.05)
    return model


def check_gradients() -> float:
    model = _tiny(0)
    tokens = torch.randint(0, 256, (1, 14), generator=torch.Generator().manual_seed(0))
    plan = fixed_plan(14, 8, [2, 4])
    params = list(model.ug_parameters().values())
    return nk.grad_check(lambda: compression_lm_loss(model, tokens, plan), params, max_coords=4, ladder=4)


def check_equivalence() -> float:
    worst = 0.0
    for seed in range(3):
        model = _tiny(seed)
        tokens = torch.randint(0, 256, (1, 21), generator=torch.Generator().manual_seed(seed))
        plan = fixed_plan(21, 8, [2, 8, 4])
        cache = compress_context(model, tokens, plan)
        with torch.no_grad():
            out = model.forward_interleaved([tokens[0]], [plan])
        for a, b in zip(cache.keys + cache.values, out.ug_keys + out.ug_values):
            worst = max(worst, (a[0] - b).abs().max().item())
    return worst


def run_selftest(report: Callable[[str], None] = print) -> int:
    """Run every check, report one line each and return the failure count."""
    failures = 0
    masks = check_masks()
    report(f"{'PASS' if masks else 'FAIL'} masks match the receptive-field oracle")
    failures += not masks
    grad = check_gradients()
    report(f"{'PASS' if grad < 1e-5 else 'FAIL'} gradient check, worst relative error {grad:.2e}")
    failures += grad >= 1e-5
    eq = check_equivalence()
    report(f"{'PASS' if eq <= 1e-10 else 'FAIL'} serial vs unified cache, max abs diff {eq:.2e}")
    failures += eq > 1e-10
    return failures
