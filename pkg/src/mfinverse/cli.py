"""Command-line entry point.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import ConfigError, load_config, save_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfinverse",
        description="Multi-fidelity Bayesian inversion of a log-permeability field",
    )
    parser.add_argument("--config", help="JSON config file merged over the preset")
    parser.add_argument("--preset", choices=("paper", "desk"), default="desk")
    parser.add_argument("--seed", type=int, help="override every section seed")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="run", help="run directory for all artifacts")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("truth", help="generate ground truth and noisy observations")
    sub.add_parser("train", help="build the training set and fit the conditional")
    infer = sub.add_parser("infer", help="run variational inference")
    infer.add_argument("--mode", choices=("bmfia", "lf_only", "hf_ref"), default="bmfia")
    sub.add_parser("refine", help="grow the training set from the last posterior")
    report = sub.add_parser("report", help="summarize a converged posterior")
    report.add_argument("--mode", choices=("bmfia", "lf_only", "hf_ref"), default="bmfia")
    sub.add_parser("gradcheck", help="finite-difference audit of all gradient paths")
    return parser


def _apply_seed(cfg: dict, seed: int) -> None:
    sections = ("observations", "training", "conditional", "svi", "report")
    for offset, section in enumerate(sections):
        cfg[section]["seed"] = seed + offset


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config, preset=args.preset)
        if args.seed is not None:
            _apply_seed(cfg, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "truth":
            obs = pipeline.cmd_truth(cfg, args.out)
            save_config(cfg, f"{args.out}/config.json")
            print(f"observations written to {args.out} (sigma2={obs.sigma2:.6g})")
        elif args.command == "train":
            _, data, calibration = pipeline.cmd_train(cfg, args.out, workers=args.workers)
            print(f"trained conditional on {data.n_samples} records")
            if calibration:
                print(
                    "held-out calibration: residual mean "
                    f"{calibration['residual_mean']:.3f}, var "
                    f"{calibration['residual_var']:.3f}"
                )
        elif args.command == "infer":
            _, trace, report = pipeline.cmd_infer(
                cfg, args.out, args.mode, workers=args.workers
            )
            print(
                f"{args.mode}: {len(trace.records)} iterations, "
                f"final elbo {trace.records[-1]['elbo']:.4g}, "
                f"90% band covers {report.coverage:.0%} of ground-truth slices"
            )
        elif args.command == "refine":
            _, data = pipeline.cmd_refine(cfg, args.out, workers=args.workers)
            print(f"training set grown to {data.n_samples} records, model retrained")
        elif args.command == "report":
            report = pipeline.cmd_report(cfg, args.out, args.mode)
            print(
                f"report written to {args.out}/report_{args.mode} "
                f"(coverage {report.coverage:.0%})"
            )
        elif args.command == "gradcheck":
            results = pipeline.cmd_gradcheck()
            width = max(len(r["name"]) for r in results)
            failed = False
            for r in results:
                status = "pass" if r["passed"] else "FAIL"
                print(
                    f"{r['name']:<{width}}  rel_error={r['rel_error']:.3e}  "
                    f"tol={r['tolerance']:.0e}  {status}"
                )
                failed = failed or not r["passed"]
            if failed:
                return 4
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except pipeline.MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
