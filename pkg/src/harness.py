"""Run driver: load or generate → split → partition → init → K rounds → persist."""

from __future__ import annotations

import contextlib
import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from src.checkpoint import (
    load_checkpoint,
    restore_admm,
    restore_fedmavg,
    save_admm_checkpoint,
    save_fedmavg_checkpoint,
)
from src.data import (
    load_ratings,
    partition_clients,
    save_id_map,
    split_train_test,
    subsample_users,
)
from src.diagnostics import (
    METRIC_COLUMNS,
    DescentTerms,
    RoundRecord,
    augmented_lagrangian,
    consensus_gap,
    nnz_fraction,
    objective,
    rmse,
    stacked_nnz_fraction,
    stationarity_residual,
    trailing_mean,
)
from src.fedmavg import FedMAvgState, fedmavg_round, init_fedmavg
from src.fedmc_admm import (
    BetaBound,
    ClientState,
    LipschitzTracker,
    ServerState,
    bound_from_tracker,
    init_run,
    prime_tracker,
    run_round,
    warn_if_beta_small,
)
from src.synthetic import generate_synthetic, load_synthetic

if TYPE_CHECKING:
    from src.config import RunConfig
    from src.data import ClientPartition, MaskedMatrix

_logger = logging.getLogger(__name__)


@dataclass
class PreparedData:
    matrix: MaskedMatrix
    partition: ClientPartition
    test_blocks: tuple[MaskedMatrix, ...]

    @property
    def blocks(self) -> list[MaskedMatrix]:
        return list(self.partition.blocks)


@dataclass
class RunResult:
    """Everything a finished run produced besides its files."""

    records: list[RoundRecord]
    frame: pd.DataFrame
    out: Path
    beta: float | None = None
    bound: BetaBound | None = None
    tracker: LipschitzTracker | None = None
    descent: list[DescentTerms] = field(default_factory=list)
    aug_lagrangians: list[float] = field(default_factory=list)
    admm: tuple[ServerState, list[ClientState]] | None = None
    fedmavg: FedMAvgState | None = None


def load_matrix(config: RunConfig) -> MaskedMatrix:
    """The observed matrix named by ``[data]`` or generated from ``[synthetic]``."""
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic).matrix

    data = config.data
    if data.format == "synthetic-npz":
        matrix = load_synthetic(data.path).matrix
    else:
        matrix = load_ratings(data.path, data.format)
    if data.max_users is not None:
        matrix = subsample_users(matrix, data.max_users, config.seeds.split)
    return matrix


def prepare_data(config: RunConfig) -> PreparedData:
    matrix = load_matrix(config)
    split = split_train_test(matrix, config.train_fraction, config.seeds.split)
    shuffle = config.data is not None and config.data.shuffle_rows
    partition = partition_clients(split.train, config.clients, config.seeds.split, shuffle)
    return PreparedData(
        matrix=matrix, partition=partition, test_blocks=partition.split_like(split.test)
    )


def evaluate_admm(
    server: ServerState,
    clients: list[ClientState],
    test_blocks: tuple[MaskedMatrix, ...],
    config: RunConfig,
    wall_time_s: float,
    sampled: list[int],
) -> RoundRecord:
    k, V, reg = server.round, server.V, config.reg
    stationarity = np.nan
    if k % config.eval_every == 0:
        stationarity = stationarity_residual(clients, V, server.beta, reg)
    return RoundRecord(
        round=k,
        wall_time_s=wall_time_s,
        objective=objective(clients, V, reg),
        rmse_test=rmse(test_blocks, [c.U for c in clients], V),
        aug_lagrangian=augmented_lagrangian(clients, V, server.beta, reg),
        consensus_gap=consensus_gap(clients, V),
        stationarity_sq=stationarity,
        nnz_U=stacked_nnz_fraction([c.U for c in clients]),
        nnz_V=nnz_fraction(V),
        sampled=sampled,
    )


def evaluate_fedmavg(
    state: FedMAvgState,
    test_blocks: tuple[MaskedMatrix, ...],
    config: RunConfig,
    wall_time_s: float,
    sampled: list[int],
) -> RoundRecord:
    return RoundRecord(
        round=state.round,
        wall_time_s=wall_time_s,
        objective=objective(state.clients, state.V, config.reg),
        rmse_test=rmse(test_blocks, [c.U for c in state.clients], state.V),
        nnz_U=stacked_nnz_fraction([c.U for c in state.clients]),
        nnz_V=nnz_fraction(state.V),
        sampled=sampled,
    )


def _log_progress(record: RoundRecord, config: RunConfig) -> None:
    if record.round % config.eval_every == 0 or record.round == config.rounds:
        _logger.info(
            "Round %d: objective %.6g, test RMSE %.6g",
            record.round,
            record.objective,
            record.rmse_test,
        )


def resolve_beta(
    config: RunConfig, clients: list[ClientState], tracker: LipschitzTracker
) -> tuple[float, BetaBound]:
    """β from the config, or twice the round-0 threshold for ``auto``."""
    prime_tracker(clients, config.reg, tracker)
    p_min = float(config.sampling_policy().inclusion_probabilities(config.clients).min())
    bound = bound_from_tracker(tracker, config.admm.N, config.clients, p_min)
    if config.admm.beta == "auto":
        beta = bound.auto
        _logger.info("beta=auto resolved to %.6g", beta)
    else:
        beta = float(config.admm.beta)
    warn_if_beta_small(beta, bound)
    return beta, bound


def _run_admm(
    config: RunConfig,
    prepared: PreparedData,
    executor: Executor | None,
    resume: Path | None,
) -> RunResult:
    policy = config.sampling_policy()
    if resume is None:
        tracker = LipschitzTracker()
        server, clients = init_run(prepared.blocks, config.hyperparams(1.0))
        beta, bound = resolve_beta(config, clients, tracker)
        server.beta = beta
        elapsed = 0.0
    else:
        ckpt = load_checkpoint(resume)
        server, clients, tracker = restore_admm(
            ckpt, prepared.blocks, config.hyperparams(ckpt.beta)
        )
        beta, elapsed = server.beta, ckpt.wall_time_s
        p_min = float(policy.inclusion_probabilities(config.clients).min())
        bound = bound_from_tracker(tracker, config.admm.N, config.clients, p_min)
    hp = config.hyperparams(beta)

    result = RunResult(
        records=[],
        frame=pd.DataFrame(),
        out=config.out,
        beta=beta,
        bound=bound,
        tracker=tracker,
    )
    record = evaluate_admm(server, clients, prepared.test_blocks, config, elapsed, [])
    result.records.append(record)
    result.aug_lagrangians.append(record.aug_lagrangian)

    while server.round < config.rounds:
        start = time.perf_counter()
        outcome = run_round(server, clients, policy, hp, tracker, executor)
        if config.timing == "wall":
            elapsed += time.perf_counter() - start
        record = evaluate_admm(
            server, clients, prepared.test_blocks, config, elapsed, outcome.sampled.tolist()
        )
        result.records.append(record)
        result.descent.append(outcome.descent)
        result.aug_lagrangians.append(record.aug_lagrangian)
        _log_progress(record, config)

    final_bound = bound_from_tracker(
        tracker,
        config.admm.N,
        config.clients,
        float(policy.inclusion_probabilities(config.clients).min()),
    )
    warn_if_beta_small(beta, final_bound)
    if config.checkpoint is not None:
        save_admm_checkpoint(config.checkpoint, server, clients, tracker, elapsed)
    result.admm = (server, clients)
    return result


def _run_fedmavg(
    config: RunConfig,
    prepared: PreparedData,
    executor: Executor | None,
    resume: Path | None,
) -> RunResult:
    policy = config.sampling_policy()
    params = config.fedmavg_params()
    if resume is None:
        state = init_fedmavg(prepared.blocks, params)
        elapsed = 0.0
    else:
        ckpt = load_checkpoint(resume)
        state = restore_fedmavg(ckpt, prepared.blocks, params)
        elapsed = ckpt.wall_time_s

    result = RunResult(records=[], frame=pd.DataFrame(), out=config.out)
    result.records.append(evaluate_fedmavg(state, prepared.test_blocks, config, elapsed, []))
    while state.round < config.rounds:
        start = time.perf_counter()
        outcome = fedmavg_round(state, policy, executor)
        if config.timing == "wall":
            elapsed += time.perf_counter() - start
        record = evaluate_fedmavg(
            state, prepared.test_blocks, config, elapsed, outcome.sampled.tolist()
        )
        result.records.append(record)
        _log_progress(record, config)

    if config.checkpoint is not None:
        save_fedmavg_checkpoint(config.checkpoint, state, elapsed)
    result.fedmavg = state
    return result


def write_metrics(records: list[RoundRecord], out: Path, window: int = 0) -> pd.DataFrame:
    """Write the per-round CSV and, with ``window`` > 0, its trailing-mean sidecar."""
    frame = pd.DataFrame([r.to_row() for r in records], columns=list(METRIC_COLUMNS))
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g", na_rep="nan")
    if window > 0:
        sidecar = out.with_name(f"{out.stem}.window{window}.csv")
        trailing_mean(frame, window).to_csv(
            sidecar, index=False, float_format="%.17g", na_rep="nan"
        )
    return frame


def run(config: RunConfig, resume: Path | None = None) -> RunResult:
    """Execute the configured run and write its metrics (and checkpoint, if asked).

    Raises:
        ConfigError, DatasetError: On invalid inputs
        DivergenceError: When an iterate turns non-finite; carries round/client
        InvariantError: When the dual identity breaks with checks enabled
    """
    prepared = prepare_data(config)
    _logger.info(
        "Running %s: %d clients, rank %d, %d rounds",
        config.algo,
        config.clients,
        config.rank,
        config.rounds,
    )
    if config.data is not None and prepared.matrix.row_ids is not None:
        save_id_map(prepared.matrix, config.out.with_name(f"{config.out.stem}.ids.npz"))

    with contextlib.ExitStack() as stack:
        executor = None
        if config.workers > 1:
            executor = stack.enter_context(ThreadPoolExecutor(max_workers=config.workers))
        if config.algo == "fedmavg":
            result = _run_fedmavg(config, prepared, executor, resume)
        else:
            result = _run_admm(config, prepared, executor, resume)

    result.frame = write_metrics(result.records, config.out, config.window)
    return result
