"""Command-line entry point: ``tstar {compress,bench,gradcheck,synth,info}``.

Exit codes: 0 success, 1 check failure, 2 input contract violation, 3 IO
error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .aggregate import MalformedMaskError
from .bench import METHODS, method_slopes, render_svg, run_bench, write_csv
from .io import (
    TensorFormatError,
    WeightsMismatchError,
    load_weights_into,
    parse_config,
    read_header,
    tensor_read,
    tensor_write,
    weights_archive_read,
)
from .pipeline import (
    ConfigError,
    MambaMiaConfig,
    init_mambamia,
    mambamia_compress,
    secondary_sample,
    token_budget,
)
from .tensorcore import ContractError, DimensionError, ParameterError
from .train import (
    GROUPS,
    NeedleTaskSpec,
    TrainingDiverged,
    count_parameters,
    group_errors,
    probe_gradcheck,
    train_needle_probe,
)

EXIT_OK, EXIT_CHECK, EXIT_CONTRACT, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
PARAM_GUARD = 100_000

# defaults used when no --config is given
BENCH_DEFAULTS = {"d": 64, "d_state": 16}
GRADCHECK_DEFAULTS = {"d": 8, "d_state": 4, "layers": 1, "k": 4, "n_patches": 8, "s": "1/2"}
SYNTH_DEFAULTS = {"d": 32, "d_state": 8, "layers": 1, "k": 4, "n_patches": 16, "s": "1/2"}

_CONTRACT_ERRORS = (DimensionError, ConfigError, ContractError, ParameterError, TensorFormatError,
                    WeightsMismatchError, MalformedMaskError)


def _load_config(path, defaults: dict | None = None, **overrides) -> MambaMiaConfig:
    if path is None:
        return MambaMiaConfig(**{**(defaults or {}), **overrides})
    text = Path(path).read_text()
    cfg = parse_config(text)
    for name, value in overrides.items():
        if getattr(cfg, name) != value:
            raise DimensionError(f"input has {name}={value} but config says {getattr(cfg, name)}")
    return cfg


def _csv_ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("need at least one positive integer")
    return values


def _csv_methods(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return methods


# --- subcommands ---------------------------------------------------------

def cmd_compress(args) -> int:
    frames = tensor_read(args.input)
    if frames.ndim != 3:
        raise DimensionError(f"input must be M x N x d, got shape {frames.shape}")
    m, n, d = frames.shape
    cfg = _load_config(args.config, n_patches=n, d=d)
    weights = init_mambamia(cfg, args.seed)
    if args.weights is not None:
        load_weights_into(weights, weights_archive_read(args.weights))
    frames = frames.astype(np.float32, copy=False)
    queries, _ = mambamia_compress(frames, weights, cfg, mode=args.mode)
    if args.mode == "joint":
        out = secondary_sample(queries, cfg.s).reshape(-1, cfg.d)
        budget = token_budget(m, n, cfg.k, cfg.s)
    else:
        out = queries.reshape(-1, cfg.d)
        budget = m * cfg.queries_per_frame
    tensor_write(args.output, out)
    print(f"token_budget {budget}")
    print(f"tokens_out {out.shape[0]}")
    if out.shape[0] != budget:
        print("error: output token count differs from the budget", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config, BENCH_DEFAULTS)

    def report(rec):
        shown = f"{rec.wall_time:.4g}s" if rec.ok else f"failed ({rec.error})"
        print(f"{rec.method:>16} M={rec.frames:<5} tokens={rec.tokens_out} {shown}", flush=True)

    records = run_bench(args.methods, args.frames, cfg, trials=args.trials, seed=args.seed,
                        heads=args.heads, on_record=report)
    if args.csv:
        write_csv(records, args.csv)
    if args.svg:
        Path(args.svg).write_text(render_svg(records))
    if args.png:
        from .plotting import render_scaling_figure

        render_scaling_figure(records, args.png, title="Compression cost vs frames")
    for method, slope in method_slopes(records).items():
        print(f"slope {method} {slope:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config, GRADCHECK_DEFAULTS)
    n_params = count_parameters(cfg, args.classes)
    if n_params > PARAM_GUARD:
        raise ConfigError("config", f"{n_params} parameters exceed the gradcheck guard of {PARAM_GUARD}; "
                                    "shrink d, d_state or layers")
    report = probe_gradcheck(cfg, seed=args.seed, frames=args.frames, classes=args.classes,
                             eps=args.eps, corrupt=args.corrupt_group)
    errors = group_errors(report)
    failed = []
    for group in GROUPS:
        if group not in errors:
            continue
        ok = errors[group] <= args.tol
        print(f"{group:<12} {errors[group]:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(group)
    print(f"mode {report.mode}, eps {report.eps:g}, tol {args.tol:g}")
    if failed:
        print(f"gradient mismatch in: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args.config, SYNTH_DEFAULTS)
    spec = NeedleTaskSpec(frames=args.frames, patches=cfg.n_patches, d=cfg.d,
                          codebook_size=args.classes, noise_std=args.noise, seed=args.seed)
    code = EXIT_OK
    try:
        report = train_needle_probe(cfg, spec, args.steps, args.seed, batch_size=args.batch_size,
                                    lr=args.lr, eval_count=args.eval_count)
    except TrainingDiverged as exc:
        report = exc.report
        code = EXIT_DIVERGED
        print(f"diverged at step {exc.step}", file=sys.stderr)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=2) + "\n")
    if code == EXIT_OK:
        print(f"accuracy {report.final_accuracy:.4f} (chance {report.chance:.4f})")
    return code


def cmd_info(args) -> int:
    header = read_header(args.input)
    print(f"magic {header.magic.decode('ascii')}")
    print(f"version {header.version}")
    print(f"dtype {header.dtype}")
    print("dims " + " ".join(str(v) for v in header.dims))
    return EXIT_OK


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tstar", description="Video-token compression toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress an M x N x d tensor file into query tokens")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="JSON model config (default: library defaults, N and d from input)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--weights", help="weights archive to load")
    src.add_argument("--seed", type=int, default=0, help="initialisation seed when no weights are given")
    p.add_argument("--mode", choices=("joint", "per_frame"), default="joint")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("bench", help="latency and memory scaling over frame counts")
    p.add_argument("--methods", type=_csv_methods, default=list(METHODS))
    p.add_argument("--frames", type=_csv_ints, default=[16, 32, 64, 128, 256])
    p.add_argument("--config")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=4, help="attention heads for the baseline")
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.add_argument("--png", help="also render a matplotlib figure to this path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--corrupt-group", choices=GROUPS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="train the needle-retention probe")
    p.add_argument("--task", choices=("needle",), default="needle")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-count", type=int, default=512)
    p.add_argument("--report", help="write the JSON training report here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("info", help="print a tensor file header without reading the payload")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
