"""Command-line entry point: ``moecomp gen|calibrate|compress|eval``.

Every command prints its fully resolved configuration as one JSON line on
stdout.  Failures print one ``error: {...}`` JSON line on stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .basis import TrainConfig
from .errors import MoECompressError
from .model_io import (SyntheticSpec, generate_synthetic, load_compressed, load_model,
                       save_compressed, save_model)
from .pipeline import (TOKEN_PRESETS, PipelineConfig, compress_model, evaluate,
                       run_calibration, sample_tokens)
from .routing import load_trace_file, save_trace_file
from .spectral import DEFAULT_RESIDUAL_FRACTION, DEFAULT_XI

DEMO_SPEC = "demo"


def _echo(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True), flush=True)


def _load_spec(arg: str) -> SyntheticSpec:
    if arg == DEMO_SPEC:
        text = resources.files("moecomp").joinpath("data/demo_spec.json").read_text()
    else:
        text = Path(arg).read_text()
    return SyntheticSpec.from_dict(json.loads(text))


def cmd_gen(args) -> None:
    spec = _load_spec(args.spec)
    _echo("gen", {"spec": spec.to_dict(), "out": str(args.out)})
    save_model(generate_synthetic(spec), args.out)


def cmd_calibrate(args) -> None:
    _echo("calibrate", {"model": str(args.model), "tokens": args.tokens, "seed": args.seed,
                        "preset": args.preset, "renorm_gates": args.renorm_gates,
                        "out": str(args.out)})
    model = load_model(args.model)
    traces = run_calibration(model, args.tokens, args.seed, args.preset, args.renorm_gates)
    save_trace_file(args.out, traces)


def cmd_compress(args) -> None:
    train = TrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed,
                        activation=args.activation)
    traces = load_trace_file(args.trace)
    model = load_model(args.model)
    config = PipelineConfig(ratio=args.ratio, xi=args.xi, k=args.k,
                            residual_fraction=args.residual_frac,
                            residual=not args.no_residual, allocation=args.allocation,
                            seed=args.seed, train=train,
                            calibration_tokens=traces[0].total // model.layers[0].top_k)
    _echo("compress", {**config.to_dict(), "model": str(args.model), "trace": str(args.trace),
                       "out": str(args.out)})
    cm = compress_model(model, traces, config)
    save_compressed(cm, args.out)


def cmd_eval(args) -> None:
    _echo("eval", {"model": str(args.model), "compressed": str(args.compressed),
                   "tokens": args.tokens, "seed": args.seed, "preset": args.preset,
                   "renorm_gates": args.renorm_gates, "report": str(args.report)})
    model = load_model(args.model)
    cm = load_compressed(args.compressed)
    X = sample_tokens(args.tokens, model.shape[2], args.seed, args.preset)
    report = evaluate(model, cm, X, args.renorm_gates)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"weighted_rel_error": f"{report['weighted_rel_error']:.6g}",
                      "forward_rel_error": f"{report['forward_rel_error']:.6g}",
                      "achieved_ratio": f"{report['achieved_ratio']:.6g}"}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moecomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded synthetic MoE model")
    p.add_argument("--spec", required=True, help=f"synthetic spec JSON, or '{DEMO_SPEC}'")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="record routing counts on seeded tokens")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--tokens", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=TOKEN_PRESETS, default="normal")
    p.add_argument("--renorm-gates", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compress", help="compress up/gate expert matrices")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--trace", required=True, type=Path)
    p.add_argument("--ratio", required=True, type=float)
    p.add_argument("--xi", type=float, default=DEFAULT_XI)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--residual-frac", type=float, default=DEFAULT_RESIDUAL_FRACTION)
    p.add_argument("--no-residual", action="store_true",
                   help="spend the residual budget on ranks instead")
    p.add_argument("--allocation", choices=("adaptive", "uniform"), default="adaptive")
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--activation", choices=("silu", "identity"), default="silu")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="evaluate a compressed artifact against its original")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--compressed", required=True, type=Path)
    p.add_argument("--tokens", required=True, type=int)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--preset", choices=TOKEN_PRESETS, default="normal")
    p.add_argument("--renorm-gates", action="store_true")
    p.add_argument("--report", required=True, type=Path)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MoECompressError, OSError, ValueError) as exc:
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
