"""Experiment commands: run, synth, check."""

import sys
from pathlib import Path

import click

from src.cli.output import (
    print_bound,
    print_error,
    print_info,
    print_record,
    print_success,
)
from src.config import load_config, load_synthetic_spec
from src.errors import FedMCError
from src.fedmc_admm import LipschitzTracker, init_run
from src.harness import prepare_data, resolve_beta, run
from src.synthetic import generate_synthetic, save_synthetic


def _beta(value: str | None) -> float | str | None:
    if value is None or value == "auto":
        return value
    try:
        return float(value)
    except ValueError as e:
        raise click.BadParameter(f"expected a number or 'auto', got {value!r}") from e


@click.command("run")
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="TOML run configuration",
)
@click.option("--algo", type=click.Choice(["fedmc-admm", "fedmavg"]))
@click.option("--reg", type=click.Choice(["l2", "l1"]))
@click.option("--beta", help="Penalty parameter, or 'auto'")
@click.option("--inner-iters", type=int, help="N for FedMC-ADMM, Q1 = Q2 for FedMAvg")
@click.option("--lambda", "lam", type=float, help="Client regularizer weight")
@click.option("--gamma", type=float, help="Server regularizer weight")
@click.option("--clients", type=int, help="Number of clients p")
@click.option("--sample-size", type=int, help="Clients sampled per round")
@click.option("--rank", type=int, help="Factor rank r")
@click.option("--rounds", type=int, help="Communication rounds K")
@click.option("--seed-split", type=int)
@click.option("--seed-init", type=int)
@click.option("--seed-sample", type=int)
@click.option("--eval-every", type=int, help="Stationarity cadence in rounds")
@click.option("--workers", type=int, help="Threads for client updates")
@click.option("--window", type=int, help="Trailing-mean window for the sidecar CSV")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Metrics CSV")
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Continue from a checkpoint",
)
def run_cmd(
    config_path: Path,
    algo: str | None,
    reg: str | None,
    beta: str | None,
    inner_iters: int | None,
    lam: float | None,
    gamma: float | None,
    clients: int | None,
    sample_size: int | None,
    rank: int | None,
    rounds: int | None,
    seed_split: int | None,
    seed_init: int | None,
    seed_sample: int | None,
    eval_every: int | None,
    workers: int | None,
    window: int | None,
    out: Path | None,
    resume: Path | None,
):
    """Run FedMC-ADMM or FedMAvg and write per-round metrics."""
    overrides = {
        "algo": algo,
        "reg.kind": reg,
        "reg.lambda": lam,
        "reg.gamma": gamma,
        "admm.beta": _beta(beta),
        "admm.N": inner_iters,
        "fedmavg.Q1": inner_iters,
        "fedmavg.Q2": inner_iters,
        "clients": clients,
        "sampling.size": sample_size,
        "rank": rank,
        "rounds": rounds,
        "seeds.split": seed_split,
        "seeds.init": seed_init,
        "seeds.sampling": seed_sample,
        "eval_every": eval_every,
        "workers": workers,
        "window": window,
        "out": None if out is None else str(out),
    }

    try:
        config = load_config(config_path, overrides)
        result = run(config, resume=resume)
    except FedMCError as e:
        print_error(str(e))
        sys.exit(1)

    print_record(result.records[-1], label=f"{config.algo} round")
    print_success(f"✓ Wrote {len(result.records)} rows to {config.out}")
    if result.beta is not None:
        print_info(f"  beta: {result.beta:.6g}")
    if config.checkpoint is not None:
        print_info(f"  Checkpoint: {config.checkpoint}")


@click.command("synth")
@click.option(
    "--spec",
    "spec_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="TOML file with a [synthetic] table",
)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
def synth(spec_path: Path, out: Path):
    """Generate a synthetic low-rank dataset with its ground truth."""
    try:
        spec = load_synthetic_spec(spec_path)
        data = generate_synthetic(spec)
        save_synthetic(data, out)
    except FedMCError as e:
        print_error(str(e))
        sys.exit(1)

    print_success(f"✓ Wrote {spec.m}x{spec.n} rank-{spec.rank} matrix to {out}")
    print_info(f"  Observed entries: {data.matrix.nnz}")


@click.command("check")
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
def check(config_path: Path):
    """Validate a config and print the beta threshold diagnostic."""
    try:
        config = load_config(config_path)
        print_success(f"✓ {config_path.name} is valid ({config.algo})")
        if config.algo != "fedmc-admm":
            return
        prepared = prepare_data(config)
        _, clients = init_run(prepared.blocks, config.hyperparams(1.0))
        _, bound = resolve_beta(config, clients, LipschitzTracker())
    except FedMCError as e:
        print_error(str(e))
        sys.exit(1)

    print_bound(config.admm.beta, bound)


run_commands = [run_cmd, synth, check]
