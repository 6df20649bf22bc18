"""
Command-line front door for loewner-lab

Exit codes: 0 every enabled check passed, 1 a check failed or the job
failed, 2 the config could not be loaded, validated or resolved.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from app.config import settings
from app.models import TimeGrid
from app.routers import corpus
from app.routers.experiments import ExperimentError, resolve_run, run_experiment
from app.schemas import ExperimentConfig
from app.services.file_service import ArtifactSink, FileError, file_service, render_json
from app.services.job_service import JobStatus, job_service

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2

SCHEMA_PATH = "schemas/experiment_config.schema.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loewner-lab",
        description="Numerical Loewner chains: drivers, flows, pathwise integrals, traces and estimate checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config_path", nargs="?", help="experiment config (JSON)")
    run.add_argument("--config", dest="config_flag", help="experiment config (JSON)")
    run.add_argument("--out", help="output directory (overrides out_dir and LOEWNER_LAB_OUT)")
    run.add_argument("--threads", type=int, help="worker threads for Monte Carlo chunks")
    run.add_argument("--seed-offset", type=int, default=0, help="shift every seed by this amount")
    run.add_argument("--strict", action="store_true", help="fail on any unconverged trace point")

    corp = sub.add_parser("corpus", help="write the standard driver corpus")
    corp.add_argument("--out", help="output directory")
    corp.add_argument("--T", type=float, default=1.0, help="horizon")
    corp.add_argument("--n", type=int, default=1024, help="grid steps")

    schema = sub.add_parser("schema", help="write the experiment config JSON schema")
    schema.add_argument("--out", default=SCHEMA_PATH, help="schema file path")
    return parser


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a config file; errors propagate for exit-code mapping"""
    return ExperimentConfig.model_validate(file_service.read_json(path))


def _validation_message(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def cmd_run(args: argparse.Namespace) -> int:
    path = args.config_flag or args.config_path
    if not path:
        print("config error: run needs a config file (positional or --config)", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        config = load_config(path)
        out_dir = file_service.resolve_out_dir(args.out, config.out_dir, settings.OUTPUT_DIR)
        if args.threads is not None:
            job_service.configure(args.threads)
        ctx = resolve_run(config, out_dir, args.seed_offset, args.strict, args.threads)
    except ValidationError as e:
        print(f"config error: {_validation_message(e)}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (json.JSONDecodeError, FileError, ExperimentError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    job = run_experiment(ctx)
    for f in job.output_files:
        print(f)
    if job.status == JobStatus.FAILED:
        print(f"{config.experiment}: job failed: {job.error}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"{config.experiment}: {'PASS' if job.passed else 'FAIL'}")
    return EXIT_PASS if job.passed else EXIT_CHECK_FAILED


def cmd_corpus(args: argparse.Namespace) -> int:
    try:
        grid = TimeGrid(T=args.T, n=args.n)
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    out_dir = file_service.resolve_out_dir(args.out, None, settings.OUTPUT_DIR)
    for f in corpus.write_corpus(ArtifactSink(out_dir), grid):
        print(f)
    return EXIT_PASS


def cmd_schema(args: argparse.Namespace) -> int:
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as f:
        f.write(render_json(ExperimentConfig.model_json_schema(by_alias=True)))
    logger.info(f"Wrote config schema to {target}")
    print(target)
    return EXIT_PASS


COMMANDS = {"run": cmd_run, "corpus": cmd_corpus, "schema": cmd_schema}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)
