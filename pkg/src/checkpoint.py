"""Versioned ``.npz`` snapshots of a run's state, for resuming."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from src.errors import CheckpointError
from src.fedmavg import FedMAvgClient, FedMAvgParams, FedMAvgState
from src.fedmc_admm import ClientState, HyperParams, LipschitzTracker, ServerState

if TYPE_CHECKING:
    from src.data import MaskedMatrix

_logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

_ADMM_CLIENT_ARRAYS = ("U", "W", "Y", "W_penultimate", "u_steps_sq", "w_steps_sq")
_TRACKER_FIELDS = ("L_U_min", "L_U_max", "L_W_min", "L_W_max", "L_cross")


@dataclass
class Checkpoint:
    """Raw contents of a checkpoint file."""

    algo: str
    round: int
    wall_time_s: float
    V: np.ndarray
    beta: float = np.nan
    clients: list[dict[str, np.ndarray | float]] = field(default_factory=list)
    tracker: dict[str, float] = field(default_factory=dict)


def save_admm_checkpoint(
    path: PathLike | str,
    server: ServerState,
    clients: list[ClientState],
    tracker: LipschitzTracker | None = None,
    wall_time_s: float = 0.0,
) -> Path:
    arrays: dict[str, np.ndarray] = {"beta": np.array(server.beta)}
    for c in clients:
        for name in _ADMM_CLIENT_ARRAYS:
            arrays[f"{name}_{c.index}"] = getattr(c, name)
        arrays[f"L_U_last_{c.index}"] = np.array(c.L_U_last)
        arrays[f"L_W_last_{c.index}"] = np.array(c.L_W_last)
    if tracker is not None:
        for name in _TRACKER_FIELDS:
            value = getattr(tracker, name)
            arrays[f"tracker_{name}"] = np.array(np.nan if value is None else value)
    return _write(path, "fedmc-admm", server.round, wall_time_s, server.V, len(clients), arrays)


def save_fedmavg_checkpoint(
    path: PathLike | str, state: FedMAvgState, wall_time_s: float = 0.0
) -> Path:
    arrays = {f"U_{c.index}": c.U for c in state.clients}
    return _write(path, "fedmavg", state.round, wall_time_s, state.V, state.p, arrays)


def _write(
    path: PathLike | str,
    algo: str,
    round: int,
    wall_time_s: float,
    V: np.ndarray,
    p: int,
    arrays: dict[str, np.ndarray],
) -> Path:
    destination = Path(path)
    destination.parent.mkdir(parents=True, exist_ok=True)
    with destination.open("wb") as f:
        np.savez_compressed(
            f,
            version=np.array(CHECKPOINT_VERSION),
            algo=np.array(algo),
            round=np.array(round),
            wall_time_s=np.array(wall_time_s),
            p=np.array(p),
            V=V,
            **arrays,
        )
    _logger.info("Saved %s checkpoint at round %d to %s", algo, round, destination)
    return destination


def load_checkpoint(path: PathLike | str) -> Checkpoint:
    """Read a checkpoint written by either save function.

    Raises:
        CheckpointError: If the file is missing, from another version, or incomplete
    """
    source = Path(path)
    if not source.exists():
        raise CheckpointError(f"Checkpoint not found: {source}")
    try:
        with np.load(source) as archive:
            version = int(archive["version"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{source.name} has version {version}, expected {CHECKPOINT_VERSION}"
                )
            algo = str(archive["algo"])
            p = int(archive["p"])
            ckpt = Checkpoint(
                algo=algo,
                round=int(archive["round"]),
                wall_time_s=float(archive["wall_time_s"]),
                V=archive["V"],
            )
            if algo == "fedmavg":
                ckpt.clients = [{"U": archive[f"U_{i}"]} for i in range(p)]
                return ckpt

            ckpt.beta = float(archive["beta"])
            for i in range(p):
                entry: dict[str, np.ndarray | float] = {
                    name: archive[f"{name}_{i}"] for name in _ADMM_CLIENT_ARRAYS
                }
                entry["L_U_last"] = float(archive[f"L_U_last_{i}"])
                entry["L_W_last"] = float(archive[f"L_W_last_{i}"])
                ckpt.clients.append(entry)
            ckpt.tracker = {
                name: float(archive[f"tracker_{name}"])
                for name in _TRACKER_FIELDS
                if f"tracker_{name}" in archive.files
            }
            return ckpt
    except KeyError as e:
        raise CheckpointError(f"{source.name} is missing array {e}") from e


def _check_blocks(ckpt: Checkpoint, blocks: list[MaskedMatrix], rank: int) -> None:
    if len(ckpt.clients) != len(blocks):
        raise CheckpointError(
            f"checkpoint holds {len(ckpt.clients)} clients, run has {len(blocks)}"
        )
    if ckpt.V.shape != (rank, blocks[0].cols):
        raise CheckpointError(f"checkpoint V has shape {ckpt.V.shape}")
    for i, (entry, block) in enumerate(zip(ckpt.clients, blocks, strict=True)):
        if entry["U"].shape != (block.rows, rank):  # type: ignore[union-attr]
            raise CheckpointError(f"client {i}: U shape does not match its data block")


def restore_admm(
    ckpt: Checkpoint, blocks: list[MaskedMatrix], hp: HyperParams
) -> tuple[ServerState, list[ClientState], LipschitzTracker]:
    if ckpt.algo != "fedmc-admm":
        raise CheckpointError(f"checkpoint is for {ckpt.algo}, not fedmc-admm")
    _check_blocks(ckpt, blocks, hp.rank)
    clients = [
        ClientState(index=i, data=block, **entry)  # type: ignore[arg-type]
        for i, (entry, block) in enumerate(zip(ckpt.clients, blocks, strict=True))
    ]
    server = ServerState(V=ckpt.V, beta=ckpt.beta, p=len(blocks), round=ckpt.round)
    tracker = LipschitzTracker()
    for name, value in ckpt.tracker.items():
        if name == "L_cross" and np.isnan(value):
            continue
        setattr(tracker, name, value)
    return server, clients, tracker


def restore_fedmavg(
    ckpt: Checkpoint, blocks: list[MaskedMatrix], params: FedMAvgParams
) -> FedMAvgState:
    if ckpt.algo != "fedmavg":
        raise CheckpointError(f"checkpoint is for {ckpt.algo}, not fedmavg")
    _check_blocks(ckpt, blocks, params.rank)
    clients = [
        FedMAvgClient(index=i, data=block, U=entry["U"])  # type: ignore[arg-type]
        for i, (entry, block) in enumerate(zip(ckpt.clients, blocks, strict=True))
    ]
    return FedMAvgState(clients=clients, V=ckpt.V, params=params, round=ckpt.round)
