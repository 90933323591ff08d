"""Output formatting helpers for CLI."""

import math

import click

from src.diagnostics import RoundRecord
from src.fedmc_admm import BetaBound


def print_error(message: str) -> None:
    """Print error message in red."""
    click.secho(f"Error: {message}", fg="red", err=True)


def print_success(message: str) -> None:
    """Print success message in green."""
    click.secho(message, fg="green")


def print_warning(message: str) -> None:
    """Print warning message in yellow."""
    click.secho(message, fg="yellow")


def print_info(message: str) -> None:
    """Print info message in blue."""
    click.secho(message, fg="blue")


def _fmt(value: float) -> str:
    return "-" if math.isnan(value) else f"{value:.6g}"


def print_record(record: RoundRecord, label: str = "Round") -> None:
    """Print one metrics row as an aligned summary.

    Args:
        record: Row to print
        label: Heading shown before the round number
    """
    click.secho(f"{label} {record.round}", fg="cyan", bold=True)
    click.echo(f"  objective       {_fmt(record.objective)}")
    click.echo(f"  test RMSE       {_fmt(record.rmse_test)}")
    click.echo(f"  aug Lagrangian  {_fmt(record.aug_lagrangian)}")
    click.echo(f"  consensus gap   {_fmt(record.consensus_gap)}")
    click.echo(f"  stationarity²   {_fmt(record.stationarity_sq)}")
    click.echo(f"  nnz U / V       {_fmt(record.nnz_U)} / {_fmt(record.nnz_V)}")
    click.echo(f"  wall time (s)   {_fmt(record.wall_time_s)}")


def print_bound(beta: float | str, bound: BetaBound) -> None:
    """Print both beta threshold terms and whether the configured beta clears them."""
    click.secho("Beta threshold (round-0 estimates)", fg="cyan", bold=True)
    if bound.cross_term is not None:
        click.echo(f"  cross term      {bound.cross_term:.6g}")
    click.echo(f"  dual term       {bound.dual_term:.6g}")
    click.echo(f"  threshold       {bound.value:.6g}")
    click.echo(f"  conservative    {bound.conservative:.6g}")
    if beta == "auto":
        print_info(f"beta=auto resolves to {bound.auto:.6g}")
    elif float(beta) < bound.value:
        print_warning(f"beta={float(beta):.6g} is below the threshold")
    else:
        print_success(f"✓ beta={float(beta):.6g} clears the threshold")
