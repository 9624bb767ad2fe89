"""Desk-scale evaluations: synthetic key-value retrieval, perplexity under
compression, the ablation grid and the objective comparison."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch

from .compressor import Session, compress_context
from .model import CompressionLM
from .numkernel import token_nll
from .segmenter import fixed_plan
from .seeding import derive_seed, make_rng
from .trainer import TrainConfig, train

UPPER = np.arange(ord("A"), ord("Z") + 1)
LOWER = np.arange(ord("a"), ord("z") + 1)
DIGITS = np.arange(ord("0"), ord("9") + 1)
QUERY_POLICIES = ("first", "random", "by-depth")
FILLERS = ("digits", "spaces")
MAX_CONTEXT = 512


class TaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KvTaskSpec:
    """Key-value retrieval instances.

    A context holds ``n_pairs`` records ``KEYvalue;`` scattered in filler.
    The query is ``?KEY`` and the answer the record's value. Keys are
    uppercase, values lowercase and filler digits or spaces, so record
    boundaries are unambiguous and an answer sits right after its key.
    """

    n_pairs: int = 6
    key_len: int = 1
    value_len: int = 1
    context_len: int = 64
    filler: str = "digits"
    query_policy: str = "random"
    depth: float = 0.5
    collision_free: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_pairs < 1 or self.key_len < 1 or self.value_len < 1:
            raise TaskConfigError("pairs, key and value lengths must be positive")
        if self.filler not in FILLERS:
            raise TaskConfigError(f"unknown filler {self.filler!r}")
        if self.query_policy not in QUERY_POLICIES:
            raise TaskConfigError(f"unknown query policy {self.query_policy!r}")
        if self.n_pairs * self.record_len > self.context_len:
            raise TaskConfigError(
                f"{self.n_pairs} records of {self.record_len} tokens do not fit {self.context_len}"
            )
        if self.context_len > MAX_CONTEXT:
            raise TaskConfigError(f"context of {self.context_len} exceeds {MAX_CONTEXT} tokens")
        if self.n_pairs > 26**self.key_len:
            raise TaskConfigError("not enough distinct keys")
        if self.collision_free and self.n_pairs > 26**self.value_len:
            raise TaskConfigError("not enough distinct values")
        if not 0.0 <= self.depth <= 1.0:
            raise TaskConfigError("depth must lie in [0, 1]")

    @property
    def record_len(self) -> int:
        return self.key_len + self.value_len + 1

    @property
    def value_space(self) -> int:
        return 26**self.value_len

    @property
    def random_guess_rate(self) -> float:
        return 1.0 / self.value_space


@dataclass
class KvInstance:
    context: np.ndarray
    query: np.ndarray
    answer: np.ndarray
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    target: int = 0


def _distinct_strings(rng: np.random.Generator, alphabet: np.ndarray, length: int, n: int) -> list[np.ndarray]:
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < n:
        s = tuple(rng.choice(alphabet, size=length).tolist())
        if s not in seen:
            seen.add(s)
            out.append(np.asarray(s, dtype=np.int64))
    return out


def _filler(rng: np.random.Generator, kind: str, n: int) -> np.ndarray:
    if kind == "digits":
        return rng.choice(DIGITS, size=n).astype(np.int64)
    return np.full(n, ord(" "), dtype=np.int64)


def sample_kv_instance(spec: KvTaskSpec, rng: np.random.Generator) -> KvInstance:
    keys = _distinct_strings(rng, UPPER, spec.key_len, spec.n_pairs)
    if spec.collision_free:
        values = _distinct_strings(rng, LOWER, spec.value_len, spec.n_pairs)
    else:
        values = [rng.choice(LOWER, size=spec.value_len).astype(np.int64) for _ in range(spec.n_pairs)]
    free = spec.context_len - spec.n_pairs * spec.record_len
    # random composition of the filler budget into n_pairs + 1 gaps
    cuts = np.sort(rng.integers(0, free + 1, size=spec.n_pairs))
    gaps = np.diff(np.concatenate([[0], cuts, [free]]))
    parts = []
    for i in range(spec.n_pairs):
        parts.append(_filler(rng, spec.filler, gaps[i]))
        parts.append(np.concatenate([keys[i], values[i], [ord(";")]]))
    parts.append(_filler(rng, spec.filler, gaps[-1]))
    context = np.concatenate(parts).astype(np.int64)

    if spec.query_policy == "first":
        target = 0
    elif spec.query_policy == "by-depth":
        target = min(int(round(spec.depth * (spec.n_pairs - 1))), spec.n_pairs - 1)
    else:
        target = int(rng.integers(spec.n_pairs))
    query = np.concatenate([[ord("?")], keys[target]]).astype(np.int64)
    return KvInstance(context, query, values[target].copy(), keys, values, target)


def gen_kv_task(spec: KvTaskSpec, index: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Instance ``index`` of the task family seeded by ``spec.seed``."""
    inst = sample_kv_instance(spec, make_rng(spec.seed, f"kv-task/{index}"))
    return inst.context, inst.query, inst.answer


class KvCorpus:
    """Training samples: a retrieval context followed by one window of
    answered queries (``?KEYvalue`` repeated, padded with filler)."""

    def __init__(self, spec: KvTaskSpec, window: int, n_queries: int | None = None) -> None:
        if spec.context_len % window:
            raise TaskConfigError("context length must be a multiple of the window")
        per = spec.key_len + spec.value_len + 1
        cap = window // per
        if cap < 1:
            raise TaskConfigError("window too small for one query")
        self.spec = spec
        self.window = window
        self.n_queries = min(n_queries or cap, cap, spec.n_pairs)
        self.length = spec.context_len + window

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.length), dtype=np.int64)
        for b in range(n):
            inst = sample_kv_instance(self.spec, rng)
            order = rng.permutation(self.spec.n_pairs)[: self.n_queries]
            q = [np.concatenate([[ord("?")], inst.keys[i], inst.values[i]]) for i in order]
            tail = np.concatenate(q)
            tail = np.concatenate([tail, _filler(rng, self.spec.filler, self.window - len(tail))])
            out[b] = np.concatenate([inst.context, tail])
        return out


class RepeatCorpus:
    """Random printable strings tiled to a fixed length.

    Every token after the first period is predictable by copying, which
    teaches a small decoder in-context lookup far faster than sparse
    retrieval records do.
    """

    def __init__(self, length: int, min_period: int = 6) -> None:
        if not 1 <= min_period <= max(1, length // 2):
            raise TaskConfigError("min_period must lie in [1, length // 2]")
        self.length = length
        self.min_period = min_period

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.length), dtype=np.int64)
        for b in range(n):
            period = int(rng.integers(self.min_period, self.length // 2 + 1))
            unit = rng.integers(33, 127, size=period)
            out[b] = np.resize(unit, self.length)
        return out


class MixedCorpus:
    """Draws each sample from one of several equal-length corpora."""

    def __init__(self, corpora: Sequence, weights: Sequence[float] | None = None) -> None:
        lengths = {c.length for c in corpora}
        if len(lengths) != 1:
            raise TaskConfigError(f"corpora disagree on sample length: {sorted(lengths)}")
        self.corpora = list(corpora)
        self.length = lengths.pop()
        w = np.asarray(weights if weights is not None else [1.0] * len(corpora), dtype=float)
        self.weights = w / w.sum()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        picks = rng.choice(len(self.corpora), size=n, p=self.weights)
        return np.stack([self.corpora[i].sample(rng, 1)[0] for i in picks])


def base_corpus(spec: KvTaskSpec, window: int, repeat_share: float = 0.5) -> MixedCorpus:
    """Plain-LM pretraining mix for a retrieval-capable base."""
    kv = KvCorpus(spec, window)
    return MixedCorpus([kv, RepeatCorpus(kv.length)], [1.0 - repeat_share, repeat_share])


# --------------------------------------------------------------------------
# retrieval


class Retriever(Protocol):
    def answer(self, contexts: np.ndarray, queries: np.ndarray, n_new: int, ratio: int) -> np.ndarray: ...


class CompressedRetriever:
    """Compress the context with a monotonous ratio, then greedy-decode the
    answer after the raw query."""

    def __init__(self, model: CompressionLM, variant: str | None = None) -> None:
        self.model = model
        self.variant = variant

    def answer(self, contexts: np.ndarray, queries: np.ndarray, n_new: int, ratio: int) -> np.ndarray:
        plan = fixed_plan(contexts.shape[1], self.model.cfg.window, ratio)
        cache = compress_context(self.model, contexts, plan, self.variant)
        session = Session(self.model, cache, ratio=ratio, variant=self.variant)
        return session.generate(queries, n_new).numpy()


class UncompressedRetriever:
    """Reference path: the base model reads the raw context (ratio ignored)."""

    def __init__(self, model: CompressionLM) -> None:
        self.model = model

    def answer(self, contexts: np.ndarray, queries: np.ndarray, n_new: int, ratio: int) -> np.ndarray:
        seq = torch.as_tensor(np.concatenate([contexts, queries], axis=1))
        out = []
        with torch.no_grad():
            for _ in range(n_new):
                nxt = self.model.forward_plain(seq)[:, -1, : self.model.cfg.ug_id].argmax(-1)
                out.append(nxt)
                seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
        return torch.stack(out, dim=1).numpy()


class OracleRetriever:
    """Looks the answer up in the context; accuracy 1.0 by construction."""

    def answer(self, contexts: np.ndarray, queries: np.ndarray, n_new: int, ratio: int) -> np.ndarray:
        out = np.zeros((len(contexts), n_new), dtype=np.int64)
        for b, (ctx, q) in enumerate(zip(contexts, queries)):
            key = q[1:]
            for i in range(len(ctx) - len(key) - n_new + 1):
                if np.array_equal(ctx[i : i + len(key)], key):
                    out[b] = ctx[i + len(key) : i + len(key) + n_new]
                    break
        return out


def kv_instances(spec: KvTaskSpec, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    items = [gen_kv_task(spec, i) for i in range(n)]
    return tuple(np.stack([it[j] for it in items]) for j in range(3))


def eval_retrieval(
    model: CompressionLM | Retriever,
    spec: KvTaskSpec,
    ratios: Iterable[int],
    n_instances: int,
    batch_size: int = 64,
    variant: str | None = None,
) -> dict[int, float]:
    """Exact-match accuracy (answers compared as token sequences) per ratio."""
    retriever = CompressedRetriever(model, variant) if isinstance(model, CompressionLM) else model
    contexts, queries, answers = kv_instances(spec, n_instances)
    result = {}
    for ratio in ratios:
        hits = 0
        for i in range(0, n_instances, batch_size):
            pred = retriever.answer(contexts[i : i + batch_size], queries[i : i + batch_size], spec.value_len, ratio)
            hits += int(np.all(pred == answers[i : i + batch_size], axis=1).sum())
        result[int(ratio)] = hits / n_instances
    return result


# --------------------------------------------------------------------------
# perplexity


def eval_ppl(
    model: CompressionLM,
    samples: np.ndarray,
    ratio: int | None,
    variant: str | None = None,
    batch_size: int = 32,
) -> float:
    """Perplexity of each sample's last window given the rest of it.

    Everything before the last window is compressed at ``ratio`` and the
    last window is scored on top of the cache. ``ratio=None`` scores the
    same tokens with the raw prefix instead (the uncompressed reference).
    """
    samples = np.asarray(samples)
    w = model.cfg.window
    T = samples.shape[1]
    if T <= w:
        raise TaskConfigError("samples need more than one window to leave a prefix")
    n_prefix = T - w
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = torch.as_tensor(samples[i : i + batch_size])
            if ratio is None:
                logits = model.forward_plain(chunk[:, :-1])[:, n_prefix - 1 :]
                nll = token_nll(logits, chunk[:, n_prefix:])
            else:
                cache = compress_context(model, chunk[:, :n_prefix], fixed_plan(n_prefix, w, ratio), variant)
                nll = Session(model, cache, ratio=ratio, variant=variant).score(chunk[:, n_prefix:])
            total += float(nll.sum())
            count += nll.numel()
    return math.exp(total / count)


# --------------------------------------------------------------------------
# ablation grid

STAGES = ("both", "pretrain-only", "finetune-only")
ABLATION_HEADER = (
    "cell",
    "mask_variant",
    "sampling",
    "train_ratio",
    "stages",
    "steps",
    "seed",
    "eval_ratio",
    "accuracy",
    "n_instances",
)


@dataclass
class AblationSetup:
    """Everything a grid cell shares: the frozen base, the data and the
    budget. ``pretrain_corpus`` feeds the pretrain-analog stage and
    ``finetune_corpus`` the task stage; each stage gets ``steps``."""

    base: CompressionLM
    spec: KvTaskSpec
    finetune_corpus: object
    pretrain_corpus: object | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_ratios: tuple[int, ...] = (4, 8)
    n_instances: int = 200


@dataclass(frozen=True)
class AblationCell:
    mask_variant: str = "stepwise"
    sampling: str = "per-segment"
    train_ratio: int = 4
    stages: str = "finetune-only"

    def __post_init__(self) -> None:
        if self.stages not in STAGES:
            raise TaskConfigError(f"unknown stages {self.stages!r}")


def grid_cells(axes: dict[str, Sequence]) -> list[AblationCell]:
    """Cartesian product of the given axes over the default cell."""
    unknown = set(axes) - set(AblationCell.__dataclass_fields__)
    if unknown:
        raise TaskConfigError(f"unknown ablation axes: {sorted(unknown)}")
    cells = [AblationCell()]
    for name, values in axes.items():
        cells = [replace(c, **{name: v}) for c in cells for v in values]
    return cells


def fresh_copy(model: CompressionLM) -> CompressionLM:
    clone = CompressionLM(model.cfg)
    clone.load_state_dict(model.state_dict())
    clone.set_trainable(base=False, ug=True)
    return clone


def train_cell(setup: AblationSetup, cell: AblationCell) -> CompressionLM:
    model = fresh_copy(setup.base)
    cfg = replace(
        setup.train,
        mask_variant=cell.mask_variant,
        sampling=cell.sampling,
        fixed_ratio=cell.train_ratio,
    )
    if cell.stages in ("both", "pretrain-only"):
        if setup.pretrain_corpus is None:
            raise TaskConfigError("this cell needs a pretrain corpus")
        train(model, setup.pretrain_corpus, replace(cfg, phase="pretrain-analog", val_samples=0, val_every=0))
    if cell.stages in ("both", "finetune-only"):
        seed = derive_seed(cfg.seed, "finetune") if cell.stages == "both" else cfg.seed
        train(model, setup.finetune_corpus, replace(cfg, phase="finetune-analog", val_samples=0, val_every=0, seed=seed))
    return model


def run_ablation(setup: AblationSetup, axes: dict[str, Sequence]) -> list[dict]:
    """Train one model per grid cell and score retrieval at each eval ratio.

    Returns one row per (cell, eval ratio), keyed by config columns.
    """
    rows = []
    for i, cell in enumerate(grid_cells(axes)):
        model = train_cell(setup, cell)
        acc = eval_retrieval(model, setup.spec, setup.eval_ratios, setup.n_instances, variant=cell.mask_variant)
        for ratio in setup.eval_ratios:
            rows.append(
                {
                    "cell": i,
                    **asdict(cell),
                    "steps": setup.train.steps,
                    "seed": setup.train.seed,
                    "eval_ratio": ratio,
                    "accuracy": acc[ratio],
                    "n_instances": setup.n_instances,
                }
            )
    return rows


def write_rows(rows: Sequence[dict], path: str | Path, header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# objective comparison


@dataclass
class ObjectiveCurves:
    curves: dict[str, list[tuple[int, float]]]
    reference_ppl: float  # uncompressed perplexity on the same validation tokens

    def steps_to(self, objective: str, target: float) -> int | None:
        """First validation step whose perplexity is at or below ``target``."""
        for step, ppl in self.curves[objective]:
            if ppl <= target:
                return step
        return None

    def midpoint_target(self) -> float:
        """Halfway from the shared starting perplexity to the reference."""
        start = self.curves["compression-lm"][0][1]
        return start - 0.5 * (start - self.reference_ppl)


def compare_objectives(base: CompressionLM, corpus, cfg: TrainConfig) -> ObjectiveCurves:
    """Train one copy of ``base`` per objective on identical batches and
    record validation perplexity at ``cfg.val_ratio`` every ``cfg.val_every``
    steps."""
    val = corpus.sample(make_rng(cfg.seed, "validation"), cfg.val_samples)
    curves = {}
    for objective in ("compression-lm", "encode-decode"):
        model = fresh_copy(base)
        log = train(model, corpus, replace(cfg, objective=objective), val_samples=val)
        curves[objective] = log.curve()
    reference = _plain_ppl(base, val)
    return ObjectiveCurves(curves, reference)


def _plain_ppl(model: CompressionLM, samples: np.ndarray) -> float:
    """Uncompressed perplexity of every token after the first window."""
    w = model.cfg.window
    with torch.no_grad():
        x = torch.as_tensor(samples)
        nll = token_nll(model.forward_plain(x[:, :-1])[:, w - 1 :], x[:, w:])
    return math.exp(float(nll.mean()))


CURVE_HEADER = ("objective", "step", "val_ppl")


def curve_rows(result: ObjectiveCurves) -> list[dict]:
    return [
        {"objective": obj, "step": s, "val_ppl": p} for obj, curve in result.curves.items() for s, p in curve
    ]
