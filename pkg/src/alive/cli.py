# ALIVE CLI Module
# Command-line interface for toy training, remote batch generation, export and run statistics

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from .backend import BackendConfig, BackendError, RemoteBackend
from .config import Config
from .datamodel import LoopConfig, NoDataError, RecordValidationError, validate_config
from .engine import EngineError, build_remote_engine, build_toy_engine
from .logging_config import setup_logging
from .promptio import TemplateError, load_templates
from .reporting import ExportError, RunReporter, format_stats
from .store import StoreWriteError
from .toypolicy import NonFiniteGradientError, ToyCorpusSpec, ToyTrainingConfig

# Faults reported as a one-line message at the command boundary
PACKAGE_ERRORS = (EngineError, BackendError, ExportError, NoDataError, RecordValidationError, TemplateError,
                  StoreWriteError, NonFiniteGradientError, FileNotFoundError, ValueError)


class AliveCLI:
    """Shared configuration and logging setup for the CLI commands."""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize CLI state.

        Args:
            config_path (Optional[str]): YAML configuration; built-in defaults when None.
            overrides (Optional[Dict[str, Any]]): Flat dotted keys taking precedence over the file.
        """
        self.config = Config(config_path) if config_path else Config.from_dict({})
        if overrides:
            self.config = Config.from_dict({**self.config.config_data, **overrides})
        self.logger = logging.getLogger(__name__)

    def limit_steps(self, steps: Optional[int]) -> None:
        """Override the total step count, shortening warm-up to fit."""
        if steps is None:
            return
        warmup = min(steps, LoopConfig.from_config(self.config).warmup_steps)
        self.config = Config.from_dict({**self.config.config_data,
                                        'loop.total_steps': steps, 'loop.warmup_steps': warmup})

    def run_dir(self, explicit: Optional[str], name: str) -> Path:
        return Path(explicit) if explicit else Path(self.config.run_root) / name

    def setup_logging(self, run_dir: Optional[Path] = None) -> None:
        log_file = str(run_dir / 'alive.log') if run_dir is not None else None
        setup_logging(self.config, log_file)


def _fail(message: str) -> None:
    click.echo(f"Error: {message}", err=True)
    raise SystemExit(1)


@click.group()
def main() -> None:
    """ALIVE - self-play reasoning loop: construct, solve, review, update."""


@main.command('toy-train')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='YAML configuration')
@click.option('--steps', type=int, help='Total steps (overrides loop.total_steps)')
@click.option('--seed', type=int, help='Seed for the corpus and the policy')
@click.option('--vocab-size', type=int, help='Digit vocabulary size (toy.vocab_size)')
@click.option('--chain-length', type=int, help='Equations per document (toy.chain_length)')
@click.option('--modulus', type=int, help='Arithmetic modulus (toy.modulus)')
@click.option('--operators', help='Comma-separated operators, e.g. "+,-,*" (toy.operators)')
@click.option('--run-dir', help='Run directory (resumed when it exists)')
def toy_train(config_path: Optional[str], steps: Optional[int], seed: Optional[int], vocab_size: Optional[int],
              chain_length: Optional[int], modulus: Optional[int], operators: Optional[str],
              run_dir: Optional[str]) -> None:
    """Train the tabular toy policy with the full loop."""
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides.update({'loop.seed': seed, 'toy.seed': seed})
    for key, value in (('toy.vocab_size', vocab_size), ('toy.chain_length', chain_length),
                       ('toy.modulus', modulus)):
        if value is not None:
            overrides[key] = value
    if operators is not None:
        overrides['toy.operators'] = [op.strip() for op in operators.split(',') if op.strip()]
    try:
        cli = AliveCLI(config_path, overrides or None)
        cli.limit_steps(steps)
        loop = LoopConfig.from_config(cli.config)
        path = cli.run_dir(run_dir, f"toy-seed{loop.seed}")
        cli.setup_logging(path)
        engine = build_toy_engine(cli.config, path)
        metrics = engine.run()
    except PACKAGE_ERRORS as e:
        _fail(str(e))
    click.echo(f"Run directory: {path}")
    if metrics is not None:
        click.echo(f"Step {metrics.step}: solver accuracy {metrics.solver_acc_mean}, "
                   f"constructor reward {metrics.constructor_reward_mean:.4f}")


@main.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='YAML configuration')
@click.option('--backend', 'backend_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Policy backend YAML')
@click.option('--oracle', 'oracle_path', type=click.Path(exists=True, dir_okay=False),
              help='Oracle/teacher backend YAML (warm-up distillation, oracle review)')
@click.option('--corpus', required=True, type=click.Path(exists=True), help='Text file, directory or QA .jsonl')
@click.option('--reviewer', type=click.Choice(['self', 'oracle']), default='self', show_default=True)
@click.option('--steps', type=int, help='Total steps (overrides loop.total_steps)')
@click.option('--run-dir', help='Run directory (resumed when it exists)')
def generate(config_path: Optional[str], backend_path: str, oracle_path: Optional[str], corpus: str,
             reviewer: str, steps: Optional[int], run_dir: Optional[str]) -> None:
    """Generate training batches with remote models (no parameter updates)."""
    try:
        cli = AliveCLI(config_path)
        cli.limit_steps(steps)
        path = cli.run_dir(run_dir, Path(corpus).stem)
        cli.setup_logging(path)
        backend = BackendConfig.from_yaml(backend_path)
        oracle = BackendConfig.from_yaml(oracle_path) if oracle_path else None
        engine = build_remote_engine(cli.config, backend, corpus, path, oracle, reviewer)
        metrics = engine.run()
    except PACKAGE_ERRORS as e:
        _fail(str(e))
    click.echo(f"Run directory: {path}")
    if metrics is not None:
        click.echo(f"Completed step {metrics.step}")


@main.command()
@click.option('--run', 'run_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Parquet archive path')
@click.option('--format-version', type=int, default=1, show_default=True)
def export(run_dir: str, out: str, format_version: int) -> None:
    """Export a run's training batches as a Parquet archive."""
    try:
        manifest = RunReporter(run_dir).export_batches(out, format_version)
    except PACKAGE_ERRORS as e:
        _fail(str(e))
    click.echo(f"Exported {len(manifest['steps'])} steps ({manifest['total_items']} items) to {out}")


@main.command()
@click.option('--run', 'run_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--window', type=int, default=50, show_default=True, help='Steps per window')
@click.option('--format', 'output_format', type=click.Choice(['text', 'json', 'csv']), default='text',
              show_default=True)
def stats(run_dir: str, window: int, output_format: str) -> None:
    """Per-window means of the run's metrics."""
    try:
        summary = RunReporter(run_dir).stats(window)
    except PACKAGE_ERRORS as e:
        _fail(str(e))
    click.echo(format_stats(summary, output_format))


def config_violations(config: Config) -> List[str]:
    """Every violation across loop, toy, template and (when present) backend settings."""
    problems = validate_config(LoopConfig.from_config(config))
    problems += ToyCorpusSpec.from_config(config).violations()
    problems += ToyTrainingConfig.from_config(config).violations()
    try:
        load_templates(config.templates_dir)
    except (TemplateError, OSError) as e:
        problems.append(f"templates: {e}")
    if config.get('backend') is not None:
        try:
            BackendConfig.from_config(config)
        except ValueError as e:
            problems.append(str(e))
    return problems


@main.command('validate-config')
@click.argument('path', type=click.Path(exists=True, dir_okay=False))
def validate_config_command(path: str) -> None:
    """Check a configuration file and list every violation."""
    try:
        problems = config_violations(Config(path))
    except (ValueError, TypeError) as e:
        _fail(f"{path}: {e}")
    if problems:
        for problem in problems:
            click.echo(problem, err=True)
        raise SystemExit(1)
    click.echo(f"{path}: OK")


@main.command()
@click.option('--backend', 'backend_path', required=True, type=click.Path(exists=True, dir_okay=False))
def health(backend_path: str) -> None:
    """Round-trip one minimal generation against a backend."""
    try:
        backend = RemoteBackend(BackendConfig.from_yaml(backend_path))
        backend.health()
    except PACKAGE_ERRORS as e:
        _fail(str(e))
    click.echo(json.dumps({'status': 'ok', 'base_url': backend.config.base_url}))


if __name__ == '__main__':
    main()
