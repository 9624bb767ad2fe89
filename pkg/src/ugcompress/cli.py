"""Command-line entry point.

Configuration is a flat ``key=value`` file with section prefixes:
``model.*`` (:class:`ModelConfig`), ``train.*`` (:class:`TrainConfig`),
``task.*`` (:class:`KvTaskSpec`) and ``run.*`` (:class:`RunSettings`).
Blank lines and ``#`` comments are ignored; unknown keys are errors.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numkernel as nk
from .compressor import CompressedCache, Session, compress_context
from .data import ByteCorpus, SyntheticDocCorpus, detokenize, ingest_corpus
from .evalharness import (
    ABLATION_HEADER,
    AblationSetup,
    KvCorpus,
    KvTaskSpec,
    TaskConfigError,
    base_corpus,
    eval_ppl,
    eval_retrieval,
    run_ablation,
    write_rows,
)
from .flopsmeter import CostConfig, TurnSchedule, flops_table, write_flops_csv
from .model import CompressionLM, ModelConfig, load_checkpoint, save_checkpoint
from .segmenter import RatioSampler, SegmentationError, fixed_plan, make_plan
from .trainer import TrainConfig, pretrain_base, train

log = logging.getLogger("ugcompress")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    seed: int = 0
    pretrain_steps: int = 1000
    pretrain_lr: float = 2e-3
    pretrain_repeat_share: float = 0.75
    pretrain_batch: int = 32
    stages: str = "finetune-only"
    eval_ratios: tuple[int, ...] = (2, 8, 32)
    n_instances: int = 200
    ablate_masks: tuple[str, ...] = ("stepwise", "segmentation")
    ablate_sampling: tuple[str, ...] = ("per-segment", "monotonous")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: KvTaskSpec = field(default_factory=KvTaskSpec)
    run: RunSettings = field(default_factory=RunSettings)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "task": KvTaskSpec, "run": RunSettings}


def _convert(raw: str, annotation, key: str):
    text = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _convert(text, inner, key)
    if origin is tuple:
        inner = args[0]
        return tuple(_convert(part, inner, key) for part in text.split(",") if part.strip())
    if annotation is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if annotation in (int, float, str):
        try:
            return annotation(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected {annotation.__name__}, got {raw!r}") from exc
    raise ConfigError(f"{key}: unsupported field type {annotation!r}")


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a configuration text."""
    updates: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _convert(value, hints[name], key)
    try:
        cfg = RunConfig(**{s: SECTIONS[s](**updates[s]) for s in SECTIONS})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.run.stages not in ("finetune-only", "pretrain-only", "both"):
        raise ConfigError(f"run.stages: unknown value {cfg.run.stages!r}")
    if not 0.0 <= cfg.run.pretrain_repeat_share <= 1.0:
        raise ConfigError("run.pretrain_repeat_share must lie in [0, 1]")
    if cfg.task.context_len % cfg.model.window:
        raise ConfigError("task.context_len must be a multiple of model.window")
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# pipelines


def build_base(cfg: RunConfig, corpus=None) -> CompressionLM:
    """Stand-in for a pretrained backbone: plain-LM training, then frozen."""
    model = CompressionLM(cfg.model, seed=cfg.run.seed)
    corpus = corpus or base_corpus(cfg.task, cfg.model.window, cfg.run.pretrain_repeat_share)
    pretrain_base(model, corpus, cfg.run.pretrain_steps, cfg.run.pretrain_lr, cfg.run.pretrain_batch, cfg.run.seed)
    return model


def _read_tokens(path: str) -> np.ndarray:
    try:
        return ingest_corpus(path)
    except OSError as exc:
        raise RuntimeError(f"cannot read {path}: {exc}") from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, cfg: RunConfig) -> int:
    base = load_checkpoint(args.base)[0] if args.base else None
    doc_corpus = None
    if cfg.run.stages != "finetune-only":
        length = cfg.task.context_len + cfg.model.window
        doc_corpus = ByteCorpus(_read_tokens(args.corpus), length) if args.corpus else SyntheticDocCorpus(length)
    out = _out_dir(args.out)
    model = base if base is not None else build_base(cfg)
    model.set_trainable(base=False, ug=True)
    task_corpus = KvCorpus(cfg.task, cfg.model.window)
    metrics = None
    if cfg.run.stages in ("pretrain-only", "both"):
        metrics = train(model, doc_corpus, dataclasses.replace(cfg.train, phase="pretrain-analog"))
    if cfg.run.stages in ("finetune-only", "both"):
        offset = metrics.rows[-1]["step"] if metrics else 0
        metrics = train(model, task_corpus, dataclasses.replace(cfg.train, phase="finetune-analog"), metrics=metrics, step_offset=offset)
    metrics.write_csv(out / "metrics.csv")
    if cfg.train.mask_variant:
        # later commands read the variant the ug weights were trained under
        model.cfg.mask_variant = cfg.train.mask_variant
    save_checkpoint(model, out / "model.ugckpt", {"run.seed": str(cfg.run.seed)})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    ratios = cfg.run.eval_ratios
    acc = eval_retrieval(model, cfg.task, ratios, cfg.run.n_instances)
    samples = KvCorpus(cfg.task, model.cfg.window).sample(np.random.default_rng(cfg.run.seed), 64)
    rows = [{"ratio": r, "accuracy": acc[r], "ppl": eval_ppl(model, samples, r)} for r in ratios]
    rows.append({"ratio": "none", "accuracy": "", "ppl": eval_ppl(model, samples, None)})
    write_rows(rows, out / "eval.csv", ("ratio", "accuracy", "ppl"))
    for r in rows:
        print(f"ratio={r['ratio']} accuracy={r['accuracy']} ppl={r['ppl']:.4g}")
    return EXIT_OK


def cmd_compress(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    tokens = _read_tokens(args.input)
    if tokens.size == 0:
        raise SegmentationError("input is empty")
    if args.ratio:
        plan = fixed_plan(len(tokens), model.cfg.window, args.ratio)
    else:
        plan = make_plan(len(tokens), model.cfg.window, RatioSampler(seed=args.seed))
    cache = compress_context(model, tokens, plan)
    out = _out_dir(args.out)
    cache.save(out / "cache.ugc")
    print(f"compressed {len(tokens)} tokens into {cache.length} slots")
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cache = CompressedCache.load(args.cache)
    tokens = _read_tokens(args.input)
    nll = Session(model, cache).score(tokens)[0]
    print("index,token,nll")
    for i, (t, v) in enumerate(zip(tokens.tolist(), nll.tolist())):
        print(f"{i},{t},{v:.6f}")
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cache = CompressedCache.load(args.cache) if args.cache else None
    prompt = np.frombuffer(args.prompt.encode(), dtype=np.uint8).astype(np.int64)
    out = Session(model, cache, ratio=args.ratio).generate(prompt, args.max_new, args.mode, args.temperature, args.seed)
    # non-UTF-8 bytes are shown as escapes rather than written raw
    print(detokenize(out[0].numpy()).decode("utf-8", "backslashreplace"))
    return EXIT_OK


def cmd_flops(args, cfg: RunConfig) -> int:
    ratio = args.ratio or cfg.train.fixed_ratio
    cost = CostConfig.from_model(cfg.model, ratio)
    rows = flops_table(cost, TurnSchedule.constant(args.turns, args.turn_len))
    write_flops_csv(rows, _out_dir(args.out) / "flops.csv")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    base = load_checkpoint(args.base)[0] if args.base else None
    out = _out_dir(args.out)
    base = base if base is not None else build_base(cfg)
    length = cfg.task.context_len + cfg.model.window
    setup = AblationSetup(
        base=base,
        spec=cfg.task,
        finetune_corpus=KvCorpus(cfg.task, cfg.model.window),
        pretrain_corpus=SyntheticDocCorpus(length),
        train=cfg.train,
        eval_ratios=cfg.run.eval_ratios,
        n_instances=cfg.run.n_instances,
    )
    axes = {"mask_variant": cfg.run.ablate_masks, "sampling": cfg.run.ablate_sampling}
    write_rows(run_ablation(setup, axes), out / "ablation.csv", ABLATION_HEADER)
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run_selftest

    failures = run_selftest(print)
    return EXIT_OK if not failures else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compress": cmd_compress,
    "score": cmd_score,
    "generate": cmd_generate,
    "flops": cmd_flops,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> typing.NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ugcompress", description="Progressive context compression with ug tokens.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out: bool = True):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
        if out:
            sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("train", help="pretrain a base (unless --base) and train the ug parameters")
    common(sp)
    sp.add_argument("--base", help="start from this checkpoint instead of pretraining a base")
    sp.add_argument("--corpus", help="byte corpus for the pretrain-analog stage")

    sp = sub.add_parser("eval", help="retrieval accuracy and perplexity per ratio")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("compress", help="compress a byte file into a cache")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--ratio", type=int, help="fixed ratio (default: per-segment sampling)")

    sp = sub.add_parser("score", help="per-token NLL of a continuation given a cache")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--input", required=True)

    sp = sub.add_parser("generate", help="decode after a prompt, optionally on top of a cache")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--prompt", default="")
    sp.add_argument("--max-new", type=int, default=32)
    sp.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--ratio", type=int, help="ratio for windows filled during decoding")

    sp = sub.add_parser("flops", help="progressive vs static FLOPs per turn")
    common(sp)
    sp.add_argument("--turns", type=int, default=16)
    sp.add_argument("--turn-len", type=int, default=32)
    sp.add_argument("--ratio", type=int, help="compression ratio (default train.fixed_ratio)")

    sp = sub.add_parser("ablate", help="mask x sampling ablation grid")
    common(sp)
    sp.add_argument("--base", help="shared base checkpoint")

    sp = sub.add_parser("selftest", help="mask oracles, gradient checks, serial/parallel equivalence")
    common(sp, out=False)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
            cfg.train.seed = args.seed
        args.seed = cfg.run.seed
        if getattr(args, "turns", 1) < 1 or getattr(args, "turn_len", 1) < 1:
            raise ConfigError("--turns and --turn-len must be >= 1")
        if getattr(args, "max_new", 1) < 1:
            raise ConfigError("--max-new must be >= 1")
    except (ConfigError, TaskConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args, cfg)
    except (RuntimeError, OSError, ValueError, nk.KernelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
