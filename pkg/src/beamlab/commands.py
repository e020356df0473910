"""Command-line front end.

    beamlab beam-verify --config runs/beam.yaml --out out/beam -v

Every subcommand runs the pipeline of the same name. Exit codes: 0 when every
verdict passed or was skipped, 1 when a verdict failed, 2 for configuration
errors and 3 for numerical failures.
"""

from collections.abc import Callable
from pathlib import Path
import logging
import sys
from typing import Any

import click

from beamlab.lib.config import load_config
from beamlab.lib.const import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR
from beamlab.lib.errors import BeamLabError, ConfigValidationError
from beamlab.lib.rich import Group, Panel, Text, Tree, console, install_logging
from beamlab.pipeline import run_scenario

logger = logging.getLogger("beamlab.commands")


def render_violations(err: ConfigValidationError) -> None:
    tree = Tree(Text(f"{len(err.violations)} violation(s)", style="fail"), guide_style="red")
    for field_, problem in err.violations:
        tree.add(Group(Text(field_, style="header"), Text(problem, style="body")))
    console.print(Panel(tree, title="Configuration is invalid", expand=False))


def execute(name: str, options: dict[str, Any]) -> int:
    overrides: dict[str, Any] = {}
    if options["threads"] is not None:
        overrides["threads"] = options["threads"]
    if options["seed"] is not None:
        overrides["seed"] = options["seed"]
    try:
        config = load_config(options["config"], overrides)
        manifest = run_scenario(config, options["out"], pipeline=name)
    except ConfigValidationError as err:
        render_violations(err)
        return EXIT_CONFIG_ERROR
    except BeamLabError as err:
        console.print(Panel(Text(str(err), style="body"), title=f"[fail]{type(err).__name__}[/fail]", subtitle=Text(name, style="secondary"), expand=False))
        return err.exit_code
    except Exception:
        logger.exception("%s crashed", name)
        return EXIT_RUNTIME_ERROR
    return manifest.exit_code


def common_options(function: Callable) -> Callable:
    options = [
        click.option("--config", "-c", "config", type=click.Path(path_type=Path), default=None, help="Run configuration (YAML)."),
        click.option("--out", "-o", "out", type=click.Path(path_type=Path), default=Path("out"), show_default=True, help="Output directory."),
        click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads."),
        click.option("--seed", type=click.IntRange(min=0), default=None, help="Seed for sampled directions."),
        click.option("--verbose", "-v", is_flag=True, help="Debug logging."),
    ]
    for option in reversed(options):
        function = option(function)
    return function


@click.group()
def cli():
    """Gaussian beam and inverse-problem workbench for semilinear waves."""


def register(name: str, help_text: str) -> None:
    @cli.command(name=name, help=help_text)
    @common_options
    def command(**options):
        install_logging(options["verbose"])
        sys.exit(execute(name, options))


register("trace", "Trace a broken null geodesic, scan charts and boundary convexity, map the recoverable set.")
register("beam-verify", "Build a Gaussian beam chain and check its residual, boundary and remainder decay.")
register("forward", "Solve the semilinear problem and run the manufactured-solution convergence study.")
register("dtn", "Sample the partial DtN map on a battery of boundary inputs.")
register("linearize", "Differentiate the solution map and compare with the linearized equations.")
register("reconstruct", "Recover V_m at points of the recoverable set.")
register("compare", "Compare two nonlinearities through boundary data and reconstruction.")


def main():
    cli()
