"""Command-line entry point: ``shiftattn <verify|mask|reach|flops|bench|train|eval> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage/configuration error.
A ``--config FILE`` of ``key=value`` lines supplies defaults; flags win.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .patterns import (
    PATTERN_NAMES,
    AttnConfig,
    build_head_plans,
    build_mask,
    make_pattern,
    write_mask_csv,
    write_mask_pgm,
)
from .tensor import ConfigError

VERIFY_TOL = 1e-10


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _shape_args(p: argparse.ArgumentParser, dim: bool = True) -> None:
    p.add_argument("--pattern", required=True, help=f"one of {', '.join(PATTERN_NAMES)}, sda2, sda4")
    p.add_argument("--n", type=_positive, required=True, help="sequence length N")
    p.add_argument("--w", type=_positive, help="window / chunk size")
    p.add_argument("--theta", type=_positive, help="dilation distance (sda)")
    p.add_argument("--heads", type=_positive, default=4)
    p.add_argument("--causal", action="store_true")
    if dim:
        p.add_argument("--dim", type=_positive, default=8, help="head dimension D")
        p.add_argument("--batch", type=_positive, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftattn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with default flag values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive, default=None,
                        help="cap BLAS worker threads (env SHIFTATTN_THREADS)")
    common.add_argument("--out", help="output file or directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="kernel vs masked dense oracle (double precision)")
    _shape_args(p)

    p = sub.add_parser("mask", parents=[common], help="write per-head PGM masks and a CSV of (head,q,k)")
    _shape_args(p, dim=False)

    p = sub.add_parser("reach", parents=[common], help="multi-layer reachability CSV")
    _shape_args(p, dim=False)
    p.add_argument("--layers", type=_positive, default=4)

    p = sub.add_parser("flops", parents=[common], help="closed-form multiply-add counts")
    _shape_args(p)

    p = sub.add_parser("bench", parents=[common], help="wall-clock timing of the forward kernel")
    _shape_args(p)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=_positive, default=1)
    p.add_argument("--precision", choices=("single", "double"), default="single")

    p = sub.add_parser("train", parents=[common], help="train the toy byte-level model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--w", type=_positive)
    p.add_argument("--theta", type=_positive)
    p.add_argument("--context", type=_positive, default=32)
    p.add_argument("--layers", type=_positive, default=2)
    p.add_argument("--model-dim", type=_positive, default=64)
    p.add_argument("--heads", type=_positive, default=4)
    p.add_argument("--batch", type=_positive, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-steps", type=int, default=20)
    p.add_argument("--pi-scale", type=float, default=1.0)
    p.add_argument("--loss-csv", help="loss curve path (default: <out>.loss.csv)")

    p = sub.add_parser("eval", parents=[common], help="sliding-window perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--context", type=_positive, required=True)
    p.add_argument("--stride", type=_positive, required=True)
    p.add_argument("--pi-scale", type=float, help="override the checkpoint's position interpolation scale")
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config and command in subparsers:
        try:
            values = read_config_file(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        sub = subparsers[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} for {command}")
            action = actions[key]
            defaults[key] = _bool(value) if isinstance(action, argparse._StoreTrueAction) else value
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _pattern(args):
    return make_pattern(args.pattern, w=args.w, theta=args.theta)


def _cfg(args) -> AttnConfig:
    return AttnConfig(getattr(args, "batch", 1), args.heads, args.n, getattr(args, "dim", 1), args.causal)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _threads(limit: int | None):
    if limit is None and os.environ.get("SHIFTATTN_THREADS"):
        limit = int(os.environ["SHIFTATTN_THREADS"])
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def cmd_verify(args) -> int:
    spec, cfg = _pattern(args), _cfg(args)
    build_head_plans(spec, cfg)
    err = analysis.oracle_error(spec, cfg, args.seed)
    print(f"max_abs_error={err!r}")
    return 0 if err < VERIFY_TOL else 1


def cmd_mask(args) -> int:
    if not args.out:
        raise UsageError("mask needs --out DIR")
    mask = build_mask(_pattern(args), _cfg(args))
    out = Path(args.out)
    write_mask_pgm(mask, out)
    write_mask_csv(mask, out / "mask.csv")
    return 0


def cmd_reach(args) -> int:
    spec, cfg = _pattern(args), _cfg(args)
    report = analysis.reachability(build_mask(spec, cfg), args.layers)
    _emit(analysis.reach_csv(spec, cfg, report), args.out)
    return 0


def cmd_flops(args) -> int:
    spec, cfg = _pattern(args), _cfg(args)
    est = analysis.flop_estimate(spec, cfg)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(analysis.BENCH_COLUMNS)
    writer.writerow([analysis.pattern_label(spec), cfg.seq_len, analysis.pattern_param(spec, cfg.seq_len),
                     cfg.heads, cfg.head_dim, "", 0, "", "", est.total, repr(est.ratio_to_full)])
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_bench(args) -> int:
    if args.reps < 5:
        raise UsageError(f"--reps must be >= 5, got {args.reps}")
    spec, cfg = _pattern(args), _cfg(args)
    build_head_plans(spec, cfg)
    rows = analysis.bench(spec, cfg, args.reps, args.warmup, args.precision, args.seed)
    _emit(analysis.bench_csv(rows), args.out)
    return 0


def cmd_train(args) -> int:
    from .lm import AdamW, ModelConfig, ToyLM, save_checkpoint, train

    if not args.out:
        raise UsageError("train needs --out CHECKPOINT")
    if args.steps < 0:
        raise UsageError(f"--steps must be >= 0, got {args.steps}")
    corpus = _read_corpus(args.corpus)
    if len(corpus) < args.context + 1:
        raise UsageError(f"corpus has {len(corpus)} bytes; need at least context+1 = {args.context + 1}")
    cfg = ModelConfig(
        layers=args.layers,
        dim=args.model_dim,
        heads=args.heads,
        train_context=args.context,
        patterns=(_pattern(args),),
        pi_scale=args.pi_scale,
    )
    cfg.check_length(args.context)
    model = ToyLM.init(cfg, args.seed)
    state = train(model, corpus, args.steps, AdamW(lr=args.lr, warmup=args.warmup_steps),
                  batch=args.batch, seed=args.seed)
    save_checkpoint(model, args.out)
    loss_path = args.loss_csv or f"{args.out}.loss.csv"
    with open(loss_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(state.losses):
            writer.writerow([step, repr(loss)])
    return 0


def cmd_eval(args) -> int:
    import dataclasses

    from .lm import eval_perplexity, load_checkpoint

    if args.stride > args.context:
        raise UsageError(f"--stride {args.stride} must not exceed --context {args.context}")
    corpus = _read_corpus(args.corpus)
    if len(corpus) <= args.context:
        raise UsageError(f"corpus has {len(corpus)} bytes; need more than context {args.context}")
    model = load_checkpoint(args.ckpt)
    if args.pi_scale is not None:
        model.config = dataclasses.replace(model.config, pi_scale=args.pi_scale)
    model.config.check_length(args.context)
    report = eval_perplexity(model, corpus, args.context, args.stride)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["context", "stride", "tokens", "nll_sum", "perplexity"])
    writer.writerow([report.context, report.stride, report.tokens, repr(report.nll_sum), repr(report.perplexity)])
    _emit(buf.getvalue(), args.out)
    return 0


def _read_corpus(path: str) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read corpus: {exc}") from exc
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


COMMANDS = {
    "verify": cmd_verify,
    "mask": cmd_mask,
    "reach": cmd_reach,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval": cmd_eval,
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        with _threads(args.threads):
            return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
