# app.py - Command-line entry point for nonlinear Maxwell scattering and shape sensitivities

import logging
import sys
from typing import Any, Callable, Dict, Optional

import click
from dotenv import load_dotenv
from rich.console import Console

from experiment_manager import ExperimentManager
from utils import __version__
from utils.errors import EXIT_SOLVER, ConfigError, exit_code_for
from utils.logging_setup import configure_logging
from utils.run_config import load_run_config
from utils.settings import get_settings

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)
console = Console(stderr=True)


def _run_command(command: str, config_path: str, out: Optional[str], seed: Optional[int],
                 threads: Optional[int], action: Callable[[ExperimentManager], Dict[str, Any]]) -> None:
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_json)
    try:
        config = load_run_config(config_path)
        manager = ExperimentManager(config, out_dir=out, seed=seed, threads=threads)
        result = action(manager)
    except ConfigError as e:
        console.print(f"[red]❌ Invalid configuration: {e}[/red]")
        sys.exit(exit_code_for(e))
    except Exception as e:
        logger.exception(f"Unexpected error in {command}")
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        sys.exit(EXIT_SOLVER)

    result["report"].print_summary(console)
    if result["success"]:
        console.print(f"[green]✅ {command} finished, report in {manager.out_dir}[/green]")
    else:
        console.print(f"[red]❌ {command}: {result['error']}[/red]")
    sys.exit(result["exit_code"])


def _common_options(fn):
    fn = click.option("--threads", type=click.IntRange(min=1), default=None,
                      help="Worker threads for assembly and independent solves")(fn)
    fn = click.option("--seed", type=int, default=None, help="Seed for sampled checks (overrides the config)")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                      help="Output directory for report.json, tables and dumps")(fn)
    fn = click.option("--config", "config_path", type=click.Path(), required=True,
                      help="JSON run configuration")(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="maxshape")
def cli():
    """Nonlinear boundary conditions for time-harmonic Maxwell problems: solves and shape sensitivities"""


@cli.command()
@_common_options
def solve(config_path, out, seed, threads):
    """Solve the configured problem by fixed-point iteration"""
    _run_command("solve", config_path, out, seed, threads, lambda m: m.solve())


@cli.command()
@_common_options
def geomcheck(config_path, out, seed, threads):
    """Expansion-order and Piola checks for the configured deformation"""
    _run_command("geomcheck", config_path, out, seed, threads, lambda m: m.geomcheck())


@cli.command()
@_common_options
def derive(config_path, out, seed, threads):
    """Material and shape derivatives with finite-difference checks"""
    _run_command("derive", config_path, out, seed, threads, lambda m: m.derive())


@cli.command()
@_common_options
def verify(config_path, out, seed, threads):
    """Full verification battery over the refinement levels"""
    _run_command("verify", config_path, out, seed, threads, lambda m: m.verify())


if __name__ == "__main__":
    cli()
