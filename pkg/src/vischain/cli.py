"""Command-line harness: data generation, training, eval, inference, reports."""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .boxes import serialize_box
from .checkpoint import load_checkpoint, read_checkpoint
from .config import (
    RunConfig,
    config_hash,
    dump_config,
    load_config,
    parse_config_text,
)
from .errors import VischainError
from .model import MultimodalModel
from .protocol import batch_generate, render_transcript
from .reengage import (
    BOX_GUIDANCE,
    IMPLICIT,
    REENCODE,
    RESAMPLE,
    cost_report,
)
from .synth import derive_sample_seed, generate_sample
from .training import ablate, build_model, evaluate, gen_dataset, mean_by_label, train

USAGE_ERROR = 1
RUNTIME_ERROR = 2

ALL_STRATEGIES = (IMPLICIT, BOX_GUIDANCE, REENCODE, RESAMPLE)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this harness reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override run seed")
    p.add_argument("--strategy", choices=ALL_STRATEGIES, help="override strategy kind")
    p.add_argument("--expansion-ratio", type=float, dest="expansion_ratio",
                   help="override box expansion ratio")
    p.add_argument("--squarify", choices=("pad-crop", "square-context"),
                   help="override crop squarification mode")
    p.add_argument("--projector", choices=("shared", "dedicated"),
                   help="override context projector choice")
    p.add_argument("--fallback-implicit", action="store_true", dest="fallback_implicit",
                   help="continue without context when a box fails to parse")
    p.add_argument("--deterministic", action="store_true",
                   help="pin BLAS/torch threading for run-to-run reproducibility")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _build_config(args) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise VischainError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.strategy is not None:
        overrides["strategy.kind"] = args.strategy
    if args.expansion_ratio is not None:
        overrides["strategy.expansion_ratio"] = repr(args.expansion_ratio)
    if args.squarify is not None:
        overrides["strategy.squarify"] = args.squarify
    if args.projector is not None:
        overrides["strategy.projector"] = args.projector
    if args.fallback_implicit:
        overrides["strategy.fallback_implicit"] = "true"
    if args.config is not None:
        return load_config(args.config, overrides)
    return parse_config_text("", overrides)


def _apply_determinism(args) -> None:
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _load_model(path: str, cfg: RunConfig) -> MultimodalModel:
    model, _ = build_model(cfg)
    load_checkpoint(path, model, optimizer=None, cfg=cfg)
    return model


def _cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    n = gen_dataset(cfg, args.out, count=args.count)
    print(f"wrote {n} rows to {args.out} (config {config_hash(cfg)})")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    _apply_determinism(args)
    artifacts = train(
        cfg,
        args.out,
        resume_from=args.resume,
        stop_at=args.stop_at,
        log=print,
    )
    print(
        f"trained {artifacts.steps_run} steps (config {config_hash(cfg)}); "
        f"checkpoint at {artifacts.checkpoint_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    _apply_determinism(args)
    model = _load_model(args.checkpoint, cfg)
    vocab = cfg.vocab()
    report = evaluate(model, cfg, vocab, cfg.strategy.build(), n_samples=args.samples)
    row = report.as_row(step=int(read_checkpoint(args.checkpoint)[0]["step"]))
    print(json.dumps(row))
    return 0


def _cmd_infer(args) -> int:
    cfg = _build_config(args)
    _apply_determinism(args)
    vocab = cfg.vocab()
    seed = derive_sample_seed(cfg.train.dataset_seed, args.image_seed)
    pixels, record = generate_sample(seed, cfg.task)
    if args.checkpoint is not None:
        model = _load_model(args.checkpoint, cfg)
    else:
        model, _ = build_model(cfg)
        print("note: no --checkpoint given, using freshly initialized weights")
    question = args.question or record.question_text
    strategy = cfg.strategy.build()
    result = batch_generate(
        model,
        torch.from_numpy(pixels).unsqueeze(0),
        [vocab.encode_words(question)],
        strategy,
        vocab,
        cfg.encoder.grid,
        cfg.decoder.max_seq_len,
    )[0]
    print(f"question: {question}")
    print(f"reference answer: {record.answer_text}")
    print(f"reference box: {serialize_box(record.gt_boxes[0])}")
    print(f"status: {result.status}")
    for k, box in enumerate(result.boxes):
        print(f"box[{k}]: {serialize_box(box)}")
    if result.failure_span is not None:
        print(f"failed span: {result.failure_span}")
    print(f"answer: {result.answer_text or '<none>'}")
    print("transcript:")
    print(render_transcript(vocab, result))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    _apply_determinism(args)
    if args.steps is not None:
        cfg = parse_config_text(dump_config(cfg), {"train.steps": str(args.steps)})
    seeds = list(range(args.seeds))
    variants = [(kind, {"strategy.kind": kind}) for kind in args.strategies]
    rows = ablate(cfg, args.out, variants, seeds, log=print if args.verbose else None)
    acc = mean_by_label(rows, "answer_acc")
    grounding = mean_by_label(rows, "acc_at_0_5")
    print("strategy\tanswer_acc\tacc_at_0_5")
    for label in args.strategies:
        print(f"{label}\t{acc[label]:.4f}\t{grounding[label]:.4f}")
    return 0


def _cmd_cost_report(args) -> int:
    cfg = _build_config(args)
    boxes = []
    for k in range(args.samples):
        seed = derive_sample_seed(cfg.train.dataset_seed, k)
        _, record = generate_sample(seed, cfg.task)
        boxes.extend(record.gt_boxes)
    print("strategy\tencoder_passes\tmacs\textra_context_tokens")
    for kind in ALL_STRATEGIES:
        strategy = parse_config_text(
            dump_config(cfg), {"strategy.kind": kind, "strategy.expansion_ratio": "default"}
        ).strategy.build()
        report = cost_report(strategy, cfg.encoder, cfg.decoder.dim, observed_boxes=boxes)
        print(
            f"{kind}\t{report.encoder_passes}\t{report.macs:.1f}\t"
            f"{report.extra_context_tokens:.2f}"
        )
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vischain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize dataset rows as JSONL")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="row count (default: train.dataset_size)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and checkpoint the result")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--stop-at", type=int, dest="stop_at",
                   help="pause after this step (resume later)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out seeds")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, help="sample count (default: train.eval_samples)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="run one sample end to end and print the transcript")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="checkpoint directory (fresh weights if omitted)")
    p.add_argument("--image-seed", type=int, default=0, dest="image_seed",
                   help="dataset index used to render the image")
    p.add_argument("--question", help="override the generated question")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("ablate", help="strategy sweep with per-seed runs")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--strategies", nargs="+", default=list(ALL_STRATEGIES),
                   choices=ALL_STRATEGIES)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("cost-report", help="analytic per-strategy cost table")
    _add_config_flags(p)
    p.add_argument("--samples", type=int, default=100,
                   help="dataset rows whose boxes feed the re-sampling average")
    p.set_defaults(func=_cmd_cost_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VischainError as err:
        print(f"error: {err}", file=sys.stderr)
        return RUNTIME_ERROR
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
