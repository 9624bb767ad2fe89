import math

import numpy as np
import pytest
import torch
from conftest import perturb_ug, tiny_config

from ugcompress import numkernel as nk
from ugcompress.compressor import (
    CompressedCache,
    Session,
    compress_append,
    compress_context,
    generate,
    score_nll,
)
from ugcompress.maskgen import VARIANTS
from ugcompress.model import CompressionLM, WindowOverflowError
from ugcompress.segmenter import RatioSampler, SegmentationError, SegmentPlan, fixed_plan, make_plan


def _tokens(n, batch=1, seed=0):
    return torch.randint(0, 256, (batch, n), generator=torch.Generator().manual_seed(seed))


def test_single_append_length(tiny64):
    cache = compress_append(tiny64, CompressedCache.empty(tiny64), _tokens(8), 4)
    assert cache.length == 2
    assert [k.shape[1] for k in cache.keys] == [2, 2]


def test_three_appends_sum(tiny64):
    cache = CompressedCache.empty(tiny64)
    for i, r in enumerate([2, 4, 2]):
        cache = compress_append(tiny64, cache, _tokens(8, seed=i), r)
    assert cache.length == 10
    assert [(r.start, r.end, r.k) for r in cache.log] == [(1, 8, 4), (9, 16, 2), (17, 24, 4)]
    assert cache.total_source_tokens == 24


def test_append_only(tiny64):
    old = compress_append(tiny64, CompressedCache.empty(tiny64), _tokens(8), 2)
    frozen = [k.clone() for k in old.keys], [v.clone() for v in old.values]
    new = compress_append(tiny64, old, _tokens(5, seed=1), 2)
    for layer in range(2):
        assert torch.equal(new.keys[layer][:, : old.length], frozen[0][layer])
        assert torch.equal(new.values[layer][:, : old.length], frozen[1][layer])
        assert torch.equal(old.keys[layer], frozen[0][layer])  # input untouched


def test_append_overflow(tiny64):
    with pytest.raises(WindowOverflowError):
        compress_append(tiny64, CompressedCache.empty(tiny64), _tokens(9), 2)


def test_empty_and_mismatched_plans(tiny64):
    with pytest.raises(SegmentationError):
        compress_context(tiny64, _tokens(0), SegmentPlan(8, 0, ()))
    with pytest.raises(nk.ContractError):
        compress_context(tiny64, _tokens(10), fixed_plan(12, 8, 2))


def test_cache_length_matches_plan_for_random_plans():
    m = CompressionLM(tiny_config(dim=8, n_layers=1, n_heads=1, mlp_dim=8, window=16), seed=0)
    rng = np.random.default_rng(0)
    for i in range(1000):
        t = int(rng.integers(1, 40))
        plan = make_plan(t, 16, RatioSampler(seed=i))
        cache = compress_context(m, _tokens(t, seed=i), plan)
        assert cache.length == sum(math.ceil(s.length / s.ratio) for s in plan.segments)


def test_compression_factor(tiny64):
    cache = compress_context(tiny64, _tokens(32), fixed_plan(32, 8, 4))
    assert cache.length / 32 == 1 / 4


@pytest.mark.parametrize("variant", VARIANTS)
def test_serial_equals_unified(variant):
    rng = np.random.default_rng(1)
    for trial in range(4):
        m = perturb_ug(CompressionLM(tiny_config(), seed=trial), seed=trial)
        n_seg = int(rng.integers(2, 5))
        t = 8 * (n_seg - 1) + int(rng.integers(1, 9))
        ratios = [int(r) for r in rng.choice([1, 2, 4, 8], size=n_seg)]
        plan = fixed_plan(t, 8, ratios)
        toks = _tokens(t, seed=trial)
        cache = compress_context(m, toks, plan, variant)
        with torch.no_grad():
            out = m.forward_interleaved([toks[0]], [plan], variant)
        for layer in range(2):
            assert (cache.keys[layer][0] - out.ug_keys[layer]).abs().max() <= 1e-10
            assert (cache.values[layer][0] - out.ug_values[layer]).abs().max() <= 1e-10


def test_serial_equals_unified_f32(tiny32):
    plan = fixed_plan(27, 8, [2, 8, 4, 1])
    toks = _tokens(27, seed=3)
    cache = compress_context(tiny32, toks, plan)
    with torch.no_grad():
        out = tiny32.forward_interleaved([toks[0]], [plan])
    for layer in range(2):
        assert (cache.keys[layer][0] - out.ug_keys[layer]).abs().max() <= 1e-4


def test_cache_round_trip(tiny32, tmp_path):
    cache = compress_context(tiny32, _tokens(20, batch=2), fixed_plan(20, 8, [2, 4, 8]))
    path = tmp_path / "cache.ugc"
    cache.save(path)
    again = CompressedCache.load(path)
    assert again.to_bytes() == path.read_bytes()
    assert again.log == cache.log and again.total_source_tokens == 20
    assert torch.equal(again.next_logits, cache.next_logits)
    assert all(torch.equal(a, b) for a, b in zip(again.keys, cache.keys))


def test_random_init_nll_near_log_vocab():
    m = CompressionLM(tiny_config(dtype="float32"), seed=5)
    cache = compress_context(m, _tokens(16), fixed_plan(16, 8, 4))
    nll = score_nll(m, cache, _tokens(40, seed=9))
    assert abs(nll.mean().item() - math.log(257)) <= 0.1 * math.log(257)


def test_scoring_chunk_invariance(tiny64):
    cache = compress_context(tiny64, _tokens(16), fixed_plan(16, 8, 2))
    cont = _tokens(21, seed=4)
    whole = Session(tiny64, cache, ratio=2).score(cont)
    s = Session(tiny64, cache, ratio=2)
    parts = torch.cat([s.score(cont[:, :3]), s.score(cont[:, 3:11]), s.score(cont[:, 11:])], dim=1)
    assert whole.shape == (1, 21)
    assert (whole - parts).abs().max() <= 1e-12


def test_scoring_matches_manual_first_token(tiny64):
    toks = _tokens(8)
    cache = compress_context(tiny64, toks, fixed_plan(8, 8, 2))
    nxt = _tokens(1, seed=2)
    nll = score_nll(tiny64, cache, nxt)
    logits = tiny64.forward_segment(toks, 2).logits[0, -1]
    assert abs(nll.item() - (torch.logsumexp(logits, 0) - logits[nxt[0, 0]]).item()) < 1e-12


def test_scoring_deterministic(tiny64):
    cache = compress_context(tiny64, _tokens(12), fixed_plan(12, 8, 4))
    cont = _tokens(6, seed=8)
    assert torch.equal(score_nll(tiny64, cache, cont), score_nll(tiny64, cache, cont))


def test_score_contract(tiny64):
    cache = compress_context(tiny64, _tokens(8), fixed_plan(8, 8, 4))
    with pytest.raises(nk.ContractError):
        score_nll(tiny64, cache, _tokens(0))
    with pytest.raises(nk.ContractError):
        score_nll(tiny64, CompressedCache.empty(tiny64), _tokens(3))


def test_greedy_deterministic(tiny64):
    cache = compress_context(tiny64, _tokens(8), fixed_plan(8, 8, 4))
    a = generate(tiny64, cache, _tokens(3, seed=1), 6)
    b = generate(tiny64, cache, _tokens(3, seed=1), 6)
    assert torch.equal(a, b) and a.shape == (1, 6)
    assert (a < 256).all()


def test_sampling_reproducible(tiny64):
    cache = compress_context(tiny64, _tokens(8), fixed_plan(8, 8, 4))
    a = generate(tiny64, cache, _tokens(2), 10, mode="sample", temperature=1.5, seed=3)
    b = generate(tiny64, cache, _tokens(2), 10, mode="sample", temperature=1.5, seed=3)
    assert torch.equal(a, b)


def test_generation_past_window_compresses_once(tiny64):
    cache = compress_context(tiny64, _tokens(8), fixed_plan(8, 8, 4))
    session = Session(tiny64, cache)
    session.generate(_tokens(0), 8 + 5)
    assert session.compressions == 1
    assert len(session.cache.log) == 2
    assert session.cache.log[-1].ratio == 4
    assert session.tail.shape[1] == 5


def test_generation_contract(tiny64):
    with pytest.raises(nk.ContractError):
        generate(tiny64, CompressedCache.empty(tiny64), _tokens(2), 0)


def test_flops_linear_in_segments(tiny64):
    costs = []
    for n_seg in range(2, 9):
        with nk.count_flops() as fc:
            compress_context(tiny64, _tokens(8 * n_seg), fixed_plan(8 * n_seg, 8, 8))
        costs.append(fc.total)
    slopes = np.diff(costs)
    assert slopes.max() <= 1.1 * slopes.min()
