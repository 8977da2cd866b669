"""Command-line entry point: ``rdopt <command> [options]``.

Exit codes: 0 success, 1 validation failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from . import experiments

EXIT_OK, EXIT_VALIDATION, EXIT_BAD_INPUT = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat config keys")
    common.add_argument("--profile", choices=["desk", "paper"], default="desk")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rdopt", description="RIS phase optimization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-dataset", parents=[common], help="label random drops with the GA expert")
    p = sub.add_parser("train", parents=[common], help="train the noise-prediction network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="where to write the checkpoint")
    p = sub.add_parser("sweep", parents=[common], help="sum SE versus downlink power for every method")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("bench", parents=[common], help="wall-clock time per optimizer call")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("validate", parents=[common], help="closed-form, moment and gradient oracles")
    p.add_argument("--full", action="store_true", help="run the full-size oracle suite")
    p.add_argument("--corrupt-delta", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.profile, seed=args.seed, out_dir=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    try:
        if args.command == "gen-dataset":
            summary = experiments.cmd_gen_dataset(cfg)
            print(f"wrote {summary['samples']} records to {summary['path']} "
                  f"(mean expert sum SE {summary['mean_achieved_se']:.4f} bit/s/Hz)")
        elif args.command == "train":
            result = experiments.cmd_train(cfg, args.dataset, args.checkpoint)
            losses = result["losses"]
            print(f"trained {len(losses)} epochs, final loss {losses[-1]:.5f}; "
                  f"checkpoint {result['checkpoint']}, losses {result['loss_csv']}")
        elif args.command == "sweep":
            for rho_db, method, mean, std, drops in experiments.cmd_sweep(cfg, args.checkpoint):
                print(f"{rho_db:6.1f} dB  {method:10s} {mean:8.4f} +- {std:.4f}  ({drops} drops)")
        elif args.command == "bench":
            for method, median_s, evals in experiments.cmd_bench(cfg, args.checkpoint):
                print(f"{method:10s} median {median_s:.5f} s  denoiser evals {evals}")
        elif args.command == "validate":
            rows = experiments.cmd_validate(cfg, corrupt_delta=args.corrupt_delta, quick=not args.full)
            for name, value, tol, ok in rows:
                print(f"{'PASS' if ok else 'FAIL'} {name} = {value:.3e} (tolerance {tol:.1e})")
            if not all(ok for *_, ok in rows):
                return EXIT_VALIDATION
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
