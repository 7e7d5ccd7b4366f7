"""
Command-line front end.

    python cli.py run --config configs/grid_attacked.json --seed 3 --out runs/attacked.csv
    python cli.py verify-fixed-point --config configs/small_mdp_attacked.json
    python cli.py consensus-check --config configs/uniform5.txt --adversary 0
    python cli.py plot-data runs/clean.csv runs/attacked.csv --out runs/plot.csv --window 10

Exit codes: 0 success, 2 configuration or assumption violation, 3 divergence,
4 verification failed (the report is still written), 1 anything else.
"""

import argparse
import logging
import sys

import matplotlib

matplotlib.use("Agg")

from ExperimentRunner import ExperimentRunner  # noqa: E402
from consensus_marl.core.errors import ConfigurationError, DivergenceError  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_VERIFICATION = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-marl",
                                     description="Consensus actor-critic experiments under a single-adversary attack")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one scenario and write its metrics CSV")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="metrics CSV path")
    run.add_argument("--episodes", type=int)
    run.add_argument("--freeze-policy", action="store_true")
    run.add_argument("--trajectory", help="write the final episode's states to this CSV")

    verify = sub.add_parser("verify-fixed-point", help="frozen-policy run checked against the exact fixed point")
    verify.add_argument("--config", required=True)
    verify.add_argument("--seed", type=int)
    verify.add_argument("--out", help="report path; a CSV table is written next to it")
    verify.add_argument("--episodes", type=int)
    verify.add_argument("--tolerance", type=float)

    check = sub.add_parser("consensus-check", help="certify a consensus matrix or graph schedule")
    check.add_argument("--config", required=True, help="dense matrix text file or JSON schedule")
    check.add_argument("--adversary", type=int)
    check.add_argument("--eta", type=float)
    check.add_argument("--seed", type=int, default=0)

    plot = sub.add_parser("plot-data", help="merge metrics CSVs into long-format plot data")
    plot.add_argument("metrics", nargs="+")
    plot.add_argument("--out", required=True)
    plot.add_argument("--window", type=int, default=1)
    plot.add_argument("--figure", help="also render the comparison to this image")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())
    runner = ExperimentRunner()
    try:
        if args.command == "run":
            summary = runner.run_scenario(args.config, args.seed, args.out, args.episodes,
                                          args.freeze_policy, args.trajectory)
            print(f"{len(summary.metrics)} episodes written to {summary.metrics_path or '<not written>'}")
            return EXIT_OK
        if args.command == "verify-fixed-point":
            report = runner.verify_fixed_point(args.config, args.seed, args.tolerance, args.out, args.episodes)
            print(report.to_text(), end="")
            return EXIT_OK if report.passed else EXIT_VERIFICATION
        if args.command == "consensus-check":
            report = runner.consensus_check(args.config, args.adversary, args.eta, args.seed)
            print(report.to_text(), end="")
            return EXIT_OK if report.passed else EXIT_VERIFICATION
        data = runner.emit_plot_data(args.metrics, args.out, args.window, args.figure)
        print(f"{len(data)} plot-data rows written to {args.out}")
        return EXIT_OK
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error(f"Training diverged: {e}")
        print(f"error: diverged at {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
