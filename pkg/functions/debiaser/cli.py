import argparse
import logging
import sys
from typing import List, Optional

from .config import ConfigError, apply_overrides, load_config
from .functions import DebiasPipeline, SpilloverResult, SweepResult
from .reports import (
    CATEGORY_COLUMNS,
    METRICS_COLUMNS,
    SPILLOVER_COLUMNS,
    SWEEP_COLUMNS,
    category_rows,
    format_table,
    metrics_rows,
    spillover_rows,
)

logger = logging.getLogger(__name__)

COMMANDS = ["gen", "pretrain", "train", "eval", "sweep", "spillover"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debias",
        description="HSIC-regularised image de-biasing: data, training, evaluation and reports.",
    )
    parser.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    parser.add_argument("--out", default=None, help="re-root data, checkpoint and report directories")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-batch progress")
    return parser


def _summary(command: str, result) -> Optional[str]:
    if command == "train":
        return format_table(METRICS_COLUMNS, metrics_rows([result[1].final_metrics]))
    if command == "eval":
        return format_table(METRICS_COLUMNS, metrics_rows(result))
    if command == "sweep" and isinstance(result, SweepResult):
        table = format_table(SWEEP_COLUMNS, result.rows)
        return f"{table}\nSpearman(lambda, DP) = {result.spearman_dp:.3f}  Spearman(lambda, AP) = {result.spearman_ap:.3f}"
    if command == "spillover" and isinstance(result, SpilloverResult):
        return "\n\n".join(
            [
                format_table(SPILLOVER_COLUMNS, spillover_rows(result.rows)),
                format_table(CATEGORY_COLUMNS, category_rows(result.categories)),
                f"Pearson(HSIC with target, |dDP|) = {result.pearson_r:.3f}",
            ]
        )
    return None


def dispatch(argv: List[str]) -> int:
    """Run one subcommand. Returns 0 on success, 2 on a usage or config
    error and 1 on any failure while running."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2

    if args.verbose:
        logging.getLogger("debiaser").setLevel(logging.DEBUG)

    try:
        config = apply_overrides(load_config(args.config), seed=args.seed, out=args.out)
    except ConfigError as e:
        print(f"debias: config error: {e}", file=sys.stderr)
        return 2

    pipeline = DebiasPipeline(config)
    try:
        result = pipeline.commands[args.command]()
    except ConfigError as e:
        print(f"debias: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"debias: {args.command} failed: {e}", file=sys.stderr)
        return 1

    summary = _summary(args.command, result)
    if summary:
        print(summary)
    return 0


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
