"""Command-line surface: train, eval, generate, stats, merge.

All commands are deterministic given a config file and seed. Checkpoints
carry the model config and creation seed, so every consumer rebuilds the
identical frozen base before loading adapters.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .adapters import ConfigurationError
from .analytics import RoutingTrace, export_trace, summary_csv, summary_table
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    read_metadata,
    save_checkpoint,
)
from .config import AppConfig, load_config
from .model import (
    ModelConfig,
    SequenceLengthError,
    apply_attention_merge,
    build_model,
    merge_attention,
)
from .taskgen import VOCAB, export_corpus, mixture
from .train import TrainingError, evaluate, run_training


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_model_from_checkpoint(path: str, renormalize: bool | None = None):
    """Rebuild the frozen base recorded in the checkpoint and load adapters."""
    meta = read_metadata(path)
    cfg = ModelConfig(**meta["model"])
    model = build_model(cfg, seed=meta["seed"])
    load_checkpoint(path, model)
    if renormalize is not None:
        for layer in model.layers:
            for slot in ("gate", "up", "down"):
                layer.ffn.slot(slot).renormalize = renormalize
    return model, meta


def _eval_data(cfg: AppConfig):
    return mixture(cfg.data.counts(), cfg.data.seed, cfg.data.length_range())


def _print_metrics(metrics: dict) -> None:
    print(f"loss {metrics['loss']:.4f}")
    for task in sorted(metrics["exact_match"]):
        print(f"exact_match[{task}] {metrics['exact_match'][task]:.3f}")
    print(f"exact_match[overall] {metrics['exact_match_overall']:.3f}")


def _write_trace(trace: RoutingTrace, out: str) -> None:
    export_trace(trace, os.path.join(out, "trace.csv"))
    summary_csv(trace, os.path.join(out, "routing_summary.csv"))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.no_renorm:
        cfg.model.renormalize_router = False
    out = _ensure_out(args.out)

    train_set, held_out = _eval_data(cfg)
    model = build_model(cfg.model, seed=cfg.train.seed)
    history = run_training(model, train_set, cfg.train,
                           log_path=os.path.join(out, "metrics.csv"))
    ckpt = os.path.join(out, "adapters.mlra")
    save_checkpoint(model, ckpt, train_config=cfg.train, seed=cfg.train.seed)
    export_corpus(train_set, os.path.join(out, "train.tsv"))
    export_corpus(held_out, os.path.join(out, "heldout.tsv"))
    if history:
        print(f"trained {len(history)} steps; "
              f"loss {history[0][2]:.4f} -> {history[-1][2]:.4f}")
    else:
        print("trained 0 steps (epochs=0); checkpoint holds the fresh state")
    print(f"checkpoint {ckpt}")

    if args.trace:
        trace = RoutingTrace(cfg.model.n_experts)
        metrics = evaluate(model, held_out, trace=trace)
        _print_metrics(metrics)
        _write_trace(trace, out)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model, _ = _load_model_from_checkpoint(
        args.checkpoint, renormalize=False if args.no_renorm else None)
    _, held_out = _eval_data(cfg)
    trace = RoutingTrace(model.config.n_experts) if args.trace else None
    metrics = evaluate(model, held_out, trace=trace)
    _print_metrics(metrics)
    if trace is not None and args.out:
        _write_trace(trace, _ensure_out(args.out))
    return 0


def cmd_generate(args) -> int:
    model, _ = _load_model_from_checkpoint(args.checkpoint)
    prompt = VOCAB.encode_text(args.prompt)
    tokens = model.generate(prompt, max_new=args.max_new, eos_id=VOCAB.eos_id)
    completion = [t for t in tokens[len(prompt):] if t != VOCAB.eos_id]
    print(VOCAB.decode(completion))
    return 0


def cmd_stats(args) -> int:
    cfg = load_config(args.config)
    model, _ = _load_model_from_checkpoint(
        args.checkpoint, renormalize=False if args.no_renorm else None)
    _, held_out = _eval_data(cfg)
    trace = RoutingTrace(model.config.n_experts)
    metrics = evaluate(model, held_out, trace=trace)
    out = _ensure_out(args.out)
    _write_trace(trace, out)
    print(summary_table(trace))
    _print_metrics(metrics)
    print(f"routing CSVs written to {out}")
    return 0


def cmd_merge(args) -> int:
    model, _ = _load_model_from_checkpoint(args.checkpoint)
    merged, skipped = merge_attention(model)
    out = _ensure_out(args.out)
    path = os.path.join(out, "merged_attention.npz")
    np.savez(path, **merged)
    apply_attention_merge(model)
    print(f"merged {len(merged)} attention linears into {path}")
    for slot in skipped:
        print(f"skipped {slot}: routed mixture has no dense equivalent")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="molora",
        description="Token-routed low-rank adapter mixtures on a frozen "
                    "toy decoder")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train adapters, write checkpoint")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", required=True)
    train.add_argument("--trace", action="store_true",
                       help="trace routing on the held-out split after training")
    train.add_argument("--no-renorm", action="store_true",
                       help="ablation: keep raw top-K softmax weights")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="per-task exact match on held-out data")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--trace", action="store_true")
    ev.add_argument("--no-renorm", action="store_true")
    ev.set_defaults(func=cmd_eval)

    gen = sub.add_parser("generate", help="greedy completion for a prompt")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--max-new", type=int, default=32)
    gen.set_defaults(func=cmd_generate)

    stats = sub.add_parser("stats", help="routing trace and summary CSVs")
    stats.add_argument("--config", required=True)
    stats.add_argument("--checkpoint", required=True)
    stats.add_argument("--out", required=True)
    stats.add_argument("--no-renorm", action="store_true")
    stats.set_defaults(func=cmd_stats)

    merge = sub.add_parser("merge", help="export dense merged attention weights")
    merge.add_argument("--checkpoint", required=True)
    merge.add_argument("--out", required=True)
    merge.set_defaults(func=cmd_merge)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, CheckpointError, TrainingError,
            SequenceLengthError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
