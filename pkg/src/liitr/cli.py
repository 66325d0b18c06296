"""Command-line driver: ``liitr <command> [--config run.json] [overrides]``.

Exit codes: 0 success, 1 partial benchmark failure, 2 config error,
3 missing artifact, 4 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .numkit import TrainingError, UsageError

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_MISSING, EXIT_USAGE = 0, 1, 2, 3, 4

# flag -> (section, field); a section of None means a top-level field
OVERRIDES = {
    "seed": (None, "seed"),
    "out": (None, "out_dir"),
    "workers": (None, "workers"),
    "n_train": ("sim", "n"),
    "misspecified": ("sim", "misspecified"),
    "n_test": ("eval", "n_test"),
    "replicates": ("eval", "replicates"),
    "m_synth": ("perturb", "m"),
    "alpha": ("perturb", "alpha"),
    "k_experts": ("moe", "k"),
    "lambda_": ("moe", "lam"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", help="run directory (default from config, else ./run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="processes for per-subject work")
    common.add_argument("--n-train", type=int, dest="n_train")
    common.add_argument("--n-test", type=int, dest="n_test")
    common.add_argument("--replicates", type=int)
    common.add_argument("--m-synth", type=int, dest="m_synth")
    common.add_argument("--alpha", type=float)
    common.add_argument("--k-experts", type=int, dest="k_experts")
    common.add_argument("--lambda", type=float, dest="lambda_")
    common.add_argument("--misspecified", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="liitr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="draw training/test data and ground truth")
    sub.add_parser("fit-blackbox", parents=[common], help="train the black-box outcome model")
    sub.add_parser("fit-vae", parents=[common], help="train the VAE perturbation generator")
    ex = sub.add_parser("explain", parents=[common], help="explain every test subject")
    ex.add_argument("--method", required=True, choices=pipeline.METHODS)
    ev = sub.add_parser("evaluate", parents=[common], help="score available explanations")
    ev.add_argument("--methods", nargs="+", choices=pipeline.METHODS)
    sub.add_parser("benchmark", parents=[common], help="full pipeline over the configured grid")
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> pipeline.RunConfig:
    """File config, then the LIITR_SEED environment variable, then flags."""
    raw = pipeline.load_config(args.config)
    if environ.get("LIITR_SEED"):
        try:
            raw["seed"] = int(environ["LIITR_SEED"])
        except ValueError as exc:
            raise pipeline.ConfigError(f"LIITR_SEED must be an integer: {exc}") from exc
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            raw[key] = value
        else:
            if not isinstance(raw.setdefault(section, {}), dict):
                raise pipeline.ConfigError(f"section {section!r} must be an object")
            raw[section][key] = value
    if getattr(args, "m_synth", None) is not None:
        raw.setdefault("lime", {})["m"] = args.m_synth
    return pipeline.RunConfig.from_dict(raw)


def run_command(args: argparse.Namespace, cfg: pipeline.RunConfig) -> int:
    run = pipeline.Run(cfg)
    if args.command == "simulate":
        pipeline.simulate(run)
    elif args.command == "fit-blackbox":
        pipeline.fit_blackbox_stage(run)
    elif args.command == "fit-vae":
        pipeline.fit_vae_stage(run)
    elif args.command == "explain":
        pipeline.explain(run, args.method)
    elif args.command == "evaluate":
        pipeline.evaluate(run, args.methods)
    elif args.command == "benchmark":
        return EXIT_OK if pipeline.benchmark(run) else EXIT_PARTIAL
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_command(args, cfg)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
