import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ugcompress.evalharness import (
    ABLATION_HEADER,
    AblationSetup,
    KvCorpus,
    KvTaskSpec,
    MixedCorpus,
    ObjectiveCurves,
    OracleRetriever,
    RepeatCorpus,
    TaskConfigError,
    UncompressedRetriever,
    base_corpus,
    compare_objectives,
    eval_ppl,
    eval_retrieval,
    gen_kv_task,
    grid_cells,
    run_ablation,
)
from ugcompress.model import CompressionLM, init_ug_params
from ugcompress.trainer import TrainConfig

from conftest import tiny_config


def _find(haystack: np.ndarray, needle: np.ndarray) -> list[int]:
    n = len(needle)
    return [i for i in range(len(haystack) - n + 1) if np.array_equal(haystack[i : i + n], needle)]


def test_single_pair_without_filler_is_verbatim():
    spec = KvTaskSpec(n_pairs=1, key_len=2, value_len=3, context_len=6)
    ctx, query, answer = gen_kv_task(spec)
    assert ctx.tolist() == query[1:].tolist() + answer.tolist() + [ord(";")]
    assert query[0] == ord("?")


@settings(max_examples=40, deadline=None)
@given(
    n_pairs=st.integers(1, 8),
    key_len=st.integers(1, 2),
    value_len=st.integers(1, 2),
    slack=st.integers(0, 20),
    seed=st.integers(0, 1000),
    filler=st.sampled_from(["digits", "spaces"]),
)
def test_answer_sits_after_its_key_once(n_pairs, key_len, value_len, slack, seed, filler):
    spec = KvTaskSpec(n_pairs, key_len, value_len, n_pairs * (key_len + value_len + 1) + slack, filler, seed=seed)
    ctx, query, answer = gen_kv_task(spec, seed)
    assert len(ctx) == spec.context_len
    hits = _find(ctx, query[1:])
    assert len(hits) == 1
    assert ctx[hits[0] + key_len : hits[0] + key_len + value_len].tolist() == answer.tolist()
    assert len(_find(ctx, answer)) == 1


def test_generation_is_seeded():
    spec = KvTaskSpec(seed=5)
    a, b = gen_kv_task(spec, 3), gen_kv_task(spec, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    other = gen_kv_task(KvTaskSpec(seed=6), 3)
    assert not np.array_equal(a[0], other[0])


def test_query_policies():
    first = KvTaskSpec(query_policy="first", seed=1)
    ctx, query, _ = gen_kv_task(first)
    upper = np.flatnonzero((ctx >= ord("A")) & (ctx <= ord("Z")))
    assert ctx[upper[0]] == query[1]
    deep = KvTaskSpec(query_policy="by-depth", depth=1.0, seed=1)
    ctx, query, _ = gen_kv_task(deep)
    upper = np.flatnonzero((ctx >= ord("A")) & (ctx <= ord("Z")))
    assert ctx[upper[-1]] == query[1]


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_pairs=0),
        dict(n_pairs=30, context_len=64),
        dict(filler="noise"),
        dict(query_policy="last"),
        dict(depth=1.5),
        dict(context_len=4096, n_pairs=2),
        dict(n_pairs=27, context_len=200),
    ],
)
def test_task_config_errors(kw):
    with pytest.raises(TaskConfigError):
        KvTaskSpec(**kw)


def test_random_guess_rate():
    assert KvTaskSpec(value_len=1).random_guess_rate == pytest.approx(1 / 26)
    assert KvTaskSpec(value_len=1).random_guess_rate < 0.05


def test_oracle_scores_perfectly():
    spec = KvTaskSpec(n_pairs=5, key_len=2, value_len=2, context_len=48, seed=9)
    assert eval_retrieval(OracleRetriever(), spec, [2, 8], 40) == {2: 1.0, 8: 1.0}


def test_kv_corpus_queries_are_answered_by_context():
    spec = KvTaskSpec(n_pairs=4, context_len=32, seed=2)
    corpus = KvCorpus(spec, window=16)
    rows = corpus.sample(np.random.default_rng(0), 5)
    assert rows.shape == (5, 48)
    for row in rows:
        ctx, tail = row[:32], row[32:]
        marks = np.flatnonzero(tail == ord("?"))
        assert len(marks) == corpus.n_queries
        for m in marks:
            key, value = tail[m + 1], tail[m + 2]
            (at,) = _find(ctx, np.array([key]))
            assert ctx[at + 1] == value


def test_kv_corpus_rejects_misaligned_context():
    with pytest.raises(TaskConfigError):
        KvCorpus(KvTaskSpec(context_len=60), window=32)


def test_repeat_corpus_is_periodic():
    rows = RepeatCorpus(40).sample(np.random.default_rng(3), 20)
    for row in rows:
        periods = [p for p in range(6, 21) if np.array_equal(row[p:], row[:-p])]
        assert periods
        assert row.min() >= 33 and row.max() < 127


def test_mixed_corpus_checks_lengths_and_weights():
    with pytest.raises(TaskConfigError):
        MixedCorpus([RepeatCorpus(20), RepeatCorpus(30)])
    spec = KvTaskSpec(n_pairs=4, context_len=32)
    only_kv = base_corpus(spec, 16, repeat_share=0.0).sample(np.random.default_rng(0), 8)
    assert (only_kv == ord("?")).any(axis=1).all()


def test_uncompressed_retriever_is_greedy_continuation():
    model = CompressionLM(tiny_config(), seed=0)
    spec = KvTaskSpec(n_pairs=2, context_len=16, seed=4)
    ctx, query, _ = gen_kv_task(spec)
    pred = UncompressedRetriever(model).answer(ctx[None], query[None], 2, ratio=2)
    seq = torch.as_tensor(np.concatenate([ctx, query]))[None]
    first = int(model.forward_plain(seq)[0, -1, : model.cfg.ug_id].argmax())
    assert pred.shape == (1, 2) and pred[0, 0] == first


@pytest.mark.parametrize("ratio", [None, 2, 8])
def test_eval_ppl_of_flat_head_is_vocab_size(ratio):
    model = init_ug_params(CompressionLM(tiny_config(), seed=0))
    with torch.no_grad():
        model.lm_head.zero_()
    samples = np.random.default_rng(0).integers(0, 256, (3, 20))
    V = model.lm_head.shape[1]
    assert eval_ppl(model, samples, ratio) == pytest.approx(V, rel=1e-9)


def test_eval_ppl_needs_a_prefix():
    model = CompressionLM(tiny_config(), seed=0)
    with pytest.raises(TaskConfigError):
        eval_ppl(model, np.zeros((1, 8), dtype=np.int64), 2)


def test_grid_cells_cartesian():
    cells = grid_cells({"mask_variant": ["stepwise", "segmentation"], "sampling": ["per-segment", "monotonous"]})
    assert len(cells) == 4
    assert {(c.mask_variant, c.sampling) for c in cells} == {
        (m, s) for m in ("stepwise", "segmentation") for s in ("per-segment", "monotonous")
    }
    with pytest.raises(TaskConfigError):
        grid_cells({"colour": [1]})


@pytest.fixture
def tiny_setup():
    spec = KvTaskSpec(n_pairs=2, context_len=16, seed=3)
    base = init_ug_params(CompressionLM(tiny_config(), seed=0))
    cfg = TrainConfig(steps=3, batch_size=2, val_every=0, val_samples=0, ratios=(2, 4))
    return AblationSetup(base, spec, KvCorpus(spec, 8), train=cfg, eval_ratios=(2, 4), n_instances=6)


def test_run_ablation_rows_and_determinism(tiny_setup):
    axes = {"sampling": ["per-segment", "monotonous"]}
    rows = run_ablation(tiny_setup, axes)
    assert len(rows) == 2 * 2
    assert [r["eval_ratio"] for r in rows] == [2, 4, 2, 4]
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)
    assert run_ablation(tiny_setup, axes) == rows


def test_masks_by_train_ratios_gives_four_full_rows(tiny_setup):
    tiny_setup.eval_ratios = (4,)
    rows = run_ablation(tiny_setup, {"mask_variant": ["stepwise", "segmentation"], "train_ratio": [2, 4]})
    assert len(rows) == 4
    assert all(list(r) == list(ABLATION_HEADER) and all(v != "" for v in r.values()) for r in rows)
    assert {(r["mask_variant"], r["train_ratio"]) for r in rows} == {
        (m, a) for m in ("stepwise", "segmentation") for a in (2, 4)
    }


def test_ablation_leaves_base_untouched(tiny_setup):
    before = {k: v.clone() for k, v in tiny_setup.base.state_dict().items()}
    run_ablation(tiny_setup, {})
    after = tiny_setup.base.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_compare_objectives_reproducible():
    spec = KvTaskSpec(n_pairs=2, context_len=16, seed=3)
    base = init_ug_params(CompressionLM(tiny_config(), seed=0))
    cfg = TrainConfig(steps=4, batch_size=2, val_every=2, val_samples=3, val_ratio=2, ratios=(2,))
    a = compare_objectives(base, KvCorpus(spec, 8), cfg)
    b = compare_objectives(base, KvCorpus(spec, 8), cfg)
    assert a.curves == b.curves and a.reference_ppl == b.reference_ppl
    starts = {curve[0] for curve in a.curves.values()}
    assert len(starts) == 1  # both copies start from the same weights
    assert math.isfinite(a.reference_ppl)


def test_objective_curve_helpers():
    curves = ObjectiveCurves({"compression-lm": [(0, 10.0), (5, 6.0), (10, 3.0)], "encode-decode": [(0, 10.0)]}, 2.0)
    assert curves.midpoint_target() == 6.0
    assert curves.steps_to("compression-lm", 6.0) == 5
    assert curves.steps_to("encode-decode", 6.0) is None
