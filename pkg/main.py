"""Command-line entrypoint for the SAAO desk-scale experiments.

    python main.py gen-data --out data --seed 1
    python main.py train --config configs/desk.conf --arch B
    python main.py transfer-matrix --config configs/desk.conf --models data/model_A.mdl,data/model_B.mdl

Every subcommand accepts ``--config <file>`` plus ``--key value`` overrides for
any settings key. Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from saao.errors import ConfigError, SaaoError
from saao.harness import ExperimentRunner
from saao.pipeline_logger import PipelineLogger
from saao.saao_config import ExperimentSettings, build_settings, load_config_file, parse_overrides, valid_keys

logger = logging.getLogger("saao.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"

COMMANDS: Dict[str, str] = {
    "gen-data": "generate the synthetic train/test splits",
    "train": "train one classifier architecture",
    "attack": "attack the evaluation set against one surrogate",
    "transfer-matrix": "attack with every model and classify with every model",
    "defend": "apply SRS or SOR to one cloud file",
    "defense-eval": "ASR under each configured defense",
    "gft": "dump one cloud's spectral energy per row",
    "ablation": "transfer ASR with and without path selection",
}

# Short flags per command, mapped onto settings keys.
ALIASES: Dict[str, Dict[str, str]] = {
    "gen-data": {"out": "data_dir"},
    "train": {"out": "model_out", "data": "data_dir"},
    "defend": {"in": "input", "out": "output"},
    "gft": {"in": "input", "out": "output"},
}
DEFAULT_ALIASES = {"out": "out_dir", "data": "data_dir"}


class CliParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def build_parser() -> CliParser:
    parser = CliParser(prog="saao", description="Spectral-aware Admix attacks on point clouds.", allow_abbrev=False)
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=CliParser)
    subparsers.required = True
    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        sub.add_argument("--config", help="flat key = value settings file")
        sub.epilog = "Any settings key can be overridden with --key value."
    return parser


def resolve_settings(command: str, config_path: Optional[str], tokens: Sequence[str]) -> ExperimentSettings:
    file_values = load_config_file(config_path) if config_path else {}
    overrides = parse_overrides(tokens)
    aliases = ALIASES.get(command, DEFAULT_ALIASES)
    overrides = {aliases.get(key, key): value for key, value in overrides.items()}
    return build_settings(file_values, overrides)


def run_command(command: str, settings: ExperimentSettings, runner: ExperimentRunner) -> None:
    handlers: Dict[str, Callable[[ExperimentSettings], object]] = {
        "gen-data": runner.generate_data,
        "train": runner.train_model,
        "attack": runner.attack,
        "transfer-matrix": runner.run_transfer_matrix,
        "defend": runner.defend_file,
        "defense-eval": runner.run_defense_eval,
        "gft": runner.spectrum,
        "ablation": runner.run_ablation,
    }
    handlers[command](settings)


def configure_logging() -> None:
    load_dotenv()
    level = os.getenv("SAAO_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    command: Optional[str] = None
    try:
        args, extra = parser.parse_known_args(argv)
        command = args.command
        settings = resolve_settings(command, args.config, extra)
    except ConfigError as exc:
        _report_config_error(parser, command, exc)
        return 2

    pipeline = PipelineLogger(command, run_id=f"seed={settings.seed}")
    pipeline.header()
    runner = ExperimentRunner(pipeline_logger=pipeline)
    try:
        run_command(command, settings, runner)
    except ConfigError as exc:
        _report_config_error(parser, command, exc)
        return 2
    except (SaaoError, OSError) as exc:
        pipeline.fail(exc)
        return 1
    pipeline.total()
    return 0


def _report_config_error(parser: CliParser, command: Optional[str], exc: ConfigError) -> None:
    usage = parser.format_usage()
    if command is not None:
        subparsers = next(action for action in parser._actions if isinstance(action, argparse._SubParsersAction))
        usage = subparsers.choices[command].format_usage()
    print(f"error: {exc}", file=sys.stderr)
    print(usage.rstrip(), file=sys.stderr)
    if "unknown config key" not in str(exc):
        print(f"settings keys: {', '.join(valid_keys())}", file=sys.stderr)


if __name__ == "__main__":
    configure_logging()
    sys.exit(cli_main())
