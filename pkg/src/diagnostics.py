"""Measured quantities: objective, test RMSE, augmented Lagrangian, stationarity."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import numpy as np
import pandas as pd

from src.data import residual_on_mask
from src.errors import DatasetError
from src.kernels import (
    RegularizerSpec,
    grad_U,
    grad_V,
    lipschitz_for_U_step,
    masked_loss,
    prox_gradient_step,
    regularizer_value,
)

if TYPE_CHECKING:
    from src.data import MaskedMatrix

METRIC_COLUMNS = (
    "round",
    "wall_time_s",
    "objective",
    "rmse_test",
    "aug_lagrangian",
    "consensus_gap",
    "stationarity_sq",
    "nnz_U",
    "nnz_V",
    "sampled_count",
)


class FactorHolder(Protocol):
    data: MaskedMatrix
    U: np.ndarray


class ConsensusHolder(FactorHolder, Protocol):
    W: np.ndarray
    Y: np.ndarray


@dataclass
class RoundRecord:
    """One row of the metrics file."""

    round: int
    wall_time_s: float
    objective: float
    rmse_test: float
    aug_lagrangian: float = np.nan
    consensus_gap: float = np.nan
    stationarity_sq: float = np.nan
    nnz_U: float = np.nan
    nnz_V: float = np.nan
    sampled: list[int] = field(default_factory=list)

    def to_row(self) -> dict[str, float | int]:
        return {
            "round": self.round,
            "wall_time_s": self.wall_time_s,
            "objective": self.objective,
            "rmse_test": self.rmse_test,
            "aug_lagrangian": self.aug_lagrangian,
            "consensus_gap": self.consensus_gap,
            "stationarity_sq": self.stationarity_sq,
            "nnz_U": self.nnz_U,
            "nnz_V": self.nnz_V,
            "sampled_count": len(self.sampled),
        }


@dataclass(frozen=True)
class DescentTerms:
    """Per-round pieces of the descent surrogate L̂^{k+1}.

    Row i of ``u_steps_sq``/``w_steps_sq`` holds client i's squared inner
    step lengths; unsampled clients contribute zero U steps and repeat their
    previous W steps.
    """

    round: int
    v_step_sq: float
    u_steps_sq: np.ndarray
    w_steps_sq: np.ndarray
    L_W: np.ndarray
    L_U_new: np.ndarray
    L_U_old: np.ndarray


def objective(
    clients: Sequence[FactorHolder], V: np.ndarray, reg: RegularizerSpec
) -> float:
    """(1/p)Σ_i[½‖P_Ω_i(M_i − U_i V)‖² + R_i(U_i)] + R(V) with the global V."""
    p = len(clients)
    total = 0.0
    for client in clients:
        total += masked_loss(client.data, client.U, V)
        total += regularizer_value(reg.kind, client.U, reg.lam)
    return total / p + regularizer_value(reg.kind, V, reg.gamma)


def rmse(
    test_blocks: Sequence[MaskedMatrix], U_blocks: Sequence[np.ndarray], V: np.ndarray
) -> float:
    """sqrt(Σ_i‖P_T_i(M_i − U_i V)‖² / N_T) on raw, unclipped predictions.

    Raises:
        DatasetError: If the test side holds no entries
    """
    count = sum(block.nnz for block in test_blocks)
    if count == 0:
        raise DatasetError("empty test set")
    squared = 0.0
    for block, U in zip(test_blocks, U_blocks, strict=True):
        r = residual_on_mask(block, U, V).values
        squared += float(r @ r)
    return float(np.sqrt(squared / count))


def augmented_lagrangian(
    clients: Sequence[ConsensusHolder],
    V: np.ndarray,
    beta: float,
    reg: RegularizerSpec,
) -> float:
    """Σ_i[(f_i(U_i, W_i) + R_i(U_i))/p + ⟨Y_i, W_i − V⟩ + (β/2)‖W_i − V‖²] + R(V)."""
    p = len(clients)
    total = 0.0
    for client in clients:
        gap = client.W - V
        total += (
            masked_loss(client.data, client.U, client.W)
            + regularizer_value(reg.kind, client.U, reg.lam)
        ) / p
        total += float(np.vdot(client.Y, gap)) + 0.5 * beta * float(np.vdot(gap, gap))
    return total + regularizer_value(reg.kind, V, reg.gamma)


def consensus_gap(clients: Sequence[ConsensusHolder], V: np.ndarray) -> float:
    """max_i ‖W_i − V‖_F."""
    return max(float(np.linalg.norm(client.W - V)) for client in clients)


def stationarity_residual(
    clients: Sequence[ConsensusHolder],
    V: np.ndarray,
    beta: float,
    reg: RegularizerSpec,
) -> float:
    """Squared-distance bound from 0 to ∂Φ at (Ū^{k+1,1}, V^{k+1}).

    Ū_i is one virtual prox step from (U_i, W_i) for every client, sampled or
    not; it is never written back. ν = Σ_i[Y_i + β(W_i − V)] is the server's
    subgradient of R at V, and ζ_i = −∇_U f_i(U_i, W_i) − L_W(Ū_i − U_i) the
    client's subgradient of R_i at Ū_i.
    """
    p = len(clients)
    v_part = np.zeros_like(V)
    u_part = 0.0
    for client in clients:
        U, W = client.U, client.W
        L_W = lipschitz_for_U_step(W)
        G = grad_U(client.data, U, W)
        U_bar = prox_gradient_step(reg.kind, U, G, L_W, reg.lam)
        zeta = -G - L_W * (U_bar - U)

        v_part += grad_V(client.data, U_bar, V) / p
        v_part += client.Y + beta * (W - V)
        u_term = (grad_U(client.data, U_bar, V) + zeta) / p
        u_part += float(np.vdot(u_term, u_term))
    return float(np.vdot(v_part, v_part)) + u_part


def nnz_fraction(X: np.ndarray, tol: float = 0.0) -> float:
    """Share of entries with |x| > tol."""
    if X.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(X) > tol)) / X.size


def stacked_nnz_fraction(blocks: Sequence[np.ndarray], tol: float = 0.0) -> float:
    """nnz fraction of the row-stacked client factors."""
    total = sum(block.size for block in blocks)
    if total == 0:
        return 0.0
    return sum(int(np.count_nonzero(np.abs(b) > tol)) for b in blocks) / total


def descent_surrogate(
    terms: DescentTerms, aug_lagrangian: float, L_cross: float, beta: float, N: int, p: int
) -> float:
    """L̂^{k+1}: the augmented Lagrangian plus the weighted step terms of round k.

    L_cross must be one fixed value across the rounds being compared.
    """
    pp = p * p * beta
    u_coef = terms.L_W / (2 * p) - 4 * N * L_cross**2 / pp
    w_coef = terms.L_U_new / (2 * p) - (16 * terms.L_U_new**2 + 4 * N * terms.L_U_old**2) / pp
    return (
        aug_lagrangian
        + 0.5 * p * beta * terms.v_step_sq
        + float(u_coef @ terms.u_steps_sq.sum(axis=1))
        + float(w_coef @ terms.w_steps_sq.sum(axis=1))
    )


def trailing_mean(frame: pd.DataFrame, window: int) -> pd.DataFrame:
    """Trailing-window means of every metric column; round and count pass through."""
    smoothed = frame.copy()
    value_columns = [c for c in frame.columns if c not in ("round", "sampled_count")]
    smoothed[value_columns] = frame[value_columns].rolling(window, min_periods=1).mean()
    return smoothed
