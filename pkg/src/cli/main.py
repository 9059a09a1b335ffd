# src/cli/main.py
# Command-line entry point: python -m src.cli.main <subcommand> [options]

import sys
import logging
import functools
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import click

from src.cli import commands
from src.cli.config import GaeCheck, RunConfig, load_config, output_dir
from src.cli.schedule_io import dump_json
from src.core.errors import ConfigError, FuseplanError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s]: %(message)s"


def _load(config_path: Optional[str], seed: Optional[int], chains: Optional[int]) -> RunConfig:
    if not config_path:
        raise ConfigError("no config given (--config or FUSEPLAN_CONFIG)", code="config.missing")
    return load_config(config_path).with_overrides(seed=seed, chains=chains)


def run_guarded(fn: Callable[..., None]) -> Callable[..., None]:
    """Map library errors onto exit codes 2 (config), 3 (infeasible) and 4 (internal)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except FuseplanError as exc:
            click.echo(f"error[{exc.code}]: {exc}", err=True)
            sys.exit(exc.exit_code)
        except Exception as exc:  # pylint: disable=broad-except
            logger.exception("unexpected failure")
            click.echo(f"error[internal]: {exc}", err=True)
            sys.exit(4)

    return wrapper


def common_options(fn: Callable[..., None]) -> Callable[..., None]:
    options = [
        click.option(
            '--config', 'config_path', type=click.Path(dir_okay=False), envvar='FUSEPLAN_CONFIG',
            help="YAML run configuration",
        ),
        click.option('--seed', type=int, envvar='FUSEPLAN_SEED', help="Annealing seed override"),
        click.option('--chains', type=int, envvar='FUSEPLAN_CHAINS', help="Number of anneal chains"),
        click.option('--out', type=click.Path(file_okay=False), envvar='FUSEPLAN_OUTPUT_DIR', help="Output directory"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@click.group()
@click.option(
    '--log-level',
    envvar='FUSEPLAN_LOG_LEVEL',
    default='INFO',
    show_default=True,
    type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
)
def cli(log_level: str):
    """Fused pipeline schedules and RLHF generation/iteration simulation."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT)


@cli.command()
@common_options
@run_guarded
def schedule(config_path, seed, chains, out):
    """Search a fused schedule and write schedule, Gantt SVG and stats."""
    config = _load(config_path, seed, chains)
    target = output_dir(out)
    commands.cmd_schedule(config, target)
    click.echo(Path(target, 'stats.txt').read_text(), nl=False)


@cli.command(name='sweep-rt')
@common_options
@run_guarded
def sweep_rt(config_path, seed, chains, out):
    """Sweep the long-tail migration threshold."""
    config = _load(config_path, seed, chains)
    target = output_dir(out)
    commands.cmd_sweep_rt(config, target)
    click.echo(Path(target, 'sweep_rt.txt').read_text(), nl=False)


@cli.command()
@common_options
@click.option('--mode', type=click.Choice(commands.ITERATE_MODES), default='both', show_default=True)
@run_guarded
def iterate(config_path, seed, chains, out, mode):
    """Simulate one RLHF iteration and print the time breakdown."""
    config = _load(config_path, seed, chains)
    data = commands.cmd_iterate(config, output_dir(out), mode)
    click.echo(data['text'], nl=False)


@cli.command()
@common_options
@run_guarded
def baselines(config_path, seed, chains, out):
    """Compare simulated 1F1B bubbles with the closed forms."""
    config = _load(config_path, seed, chains)
    table = commands.cmd_baselines(config, output_dir(out))
    click.echo(table.to_string(index=False))


@cli.command()
@common_options
@run_guarded
def oracle(config_path, seed, chains, out):
    """Exhaustive optimum of a tiny layout against the heuristics."""
    config = _load(config_path, seed, chains)
    data = commands.cmd_oracle(config, output_dir(out))
    click.echo(dump_json(data), nl=False)


@cli.command(name='gae-check')
@common_options
@run_guarded
def gae_check(config_path, seed, chains, out):
    """Check the matrix GAE form against the recursion on random inputs."""
    check = load_config(config_path).gae if config_path else GaeCheck()
    if seed is not None:
        check = replace(check, seed=seed)
    data = commands.cmd_gae_check(check, output_dir(out))
    click.echo(dump_json(data), nl=False)
    if not data['passed']:
        sys.exit(4)


if __name__ == '__main__':
    cli()  # pylint: disable=no-value-for-parameter
