"""Command-line entry point: train, eval, flops, inspect, gen-data, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .flops import PAPER_SHAPE, count_flops
from .layerdrop import ConfigError
from .model import CheckpointError, canonical_json, load_checkpoint, parameter_census
from .synth_task import TaskSpec, dump, generate, load
from .train import DataSource, NumericFailure, TrainConfig, eval_kept, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


def _print(obj) -> None:
    sys.stdout.write(canonical_json(obj) + "\n")


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    examples = load(args.data) if args.data else None
    result = train(cfg, args.out, examples=examples)
    _print({k: result.final[k] for k in ("step", "loss", "accuracy", "steps_to_90")})
    return EXIT_OK


def _train_config_from_header(header) -> TrainConfig:
    return TrainConfig.from_flat(header["train_config"])


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    cfg = _train_config_from_header(header)
    q, v, a = DataSource(cfg).eval_set(seed=args.seed, count=args.count)
    loss, acc = evaluate(model, q, v, a, kept=eval_kept(model))
    _print({"seed": args.seed, "count": args.count, "loss": loss, "accuracy": acc})
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = TrainConfig.load(args.config)
    enc = cfg.encoder
    seq_lens = (cfg.task.question_len, cfg.task.n_slots)
    if args.paper_shape:
        enc = dataclasses.replace(enc, **PAPER_SHAPE)
        seq_lens = (PAPER_SHAPE["max_text_len"], PAPER_SHAPE["max_slots"])
    report = count_flops(enc, seq_lens, span_aware=args.span_aware, pruned=args.pruned)
    report["config"] = {"L": enc.L, "V": enc.V, "X": enc.X, "d": enc.d, "heads": enc.heads,
                        "seq_lens": list(seq_lens), "mechanism": enc.mechanism,
                        "pruned": args.pruned, "span_aware": args.span_aware}
    _print(report)
    return EXIT_OK


def inspect_report(model) -> dict:
    cfg = model.config
    report = {"config": cfg.to_dict(), "census": parameter_census(model),
              "flops": count_flops(model, span_aware=True)["streams"]}
    spans = model.head_spans()
    if spans:
        report["spans"] = spans
        report["spans_clipped"] = {k: min(v, cfg.max_text_len) for k, v in spans.items()}
    alphas = model.head_alphas()
    if alphas:
        report["alphas"] = alphas
    report["flops"]["total"] = sum(report["flops"].values())
    return report


def cmd_inspect(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _print(inspect_report(model))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = TaskSpec.from_dict(json.loads(Path(args.task).read_text())) if args.task else TaskSpec()
    n = dump(generate(args.seed, args.count, spec), args.out)
    _print({"written": n, "out": str(args.out)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import run_ablation
    cfg = TrainConfig.load(args.config)
    seeds = list(range(args.seeds))
    rows = run_ablation(cfg, seeds, args.out, steps=args.steps)
    _print({"rows": len(rows), "out": str(args.out)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-vl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a flat JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--data", help="JSONL dataset from gen-data (default: generate on the fly)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on freshly generated data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--count", type=int, required=True)
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("flops", help="analytic FLOP count for a config")
    f.add_argument("--config", required=True)
    f.add_argument("--span-aware", action="store_true")
    f.add_argument("--pruned", action="store_true")
    f.add_argument("--paper-shape", action="store_true",
                   help="use BERT-base widths with 20 text tokens and 36 vision slots")
    f.set_defaults(fn=cmd_flops)

    i = sub.add_parser("inspect", help="dump spans, alphas, census and FLOPs of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--task", help="optional JSON file with task parameters")
    g.set_defaults(fn=cmd_gen_data)

    a = sub.add_parser("ablate", help="train every mechanism over several seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--steps", type=int, default=None)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (NumericFailure, ArithmeticError, FloatingPointError) as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
