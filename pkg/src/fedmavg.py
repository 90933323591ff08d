"""FedMAvg baseline: inner gradient loops on U_i and W_i, server averaging.

Step denominators: d_i = 5·λ_max(UᵀU) on the W side; on the U side the
"mirror" rule c = 5·λ_max(VVᵀ) + λ, or a fixed positive override.
"""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat

from src.errors import DivergenceError, DomainError
from src.kernels import LIPSCHITZ_FLOOR, grad_U, grad_V, spectral_max
from src.sampling import SamplingPolicy, sample_clients

if TYPE_CHECKING:
    from src.data import ClientPartition, MaskedMatrix

_logger = logging.getLogger(__name__)

CRule = Literal["mirror"] | PositiveFloat


class FedMAvgParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    Q1: int = Field(10, ge=1)
    Q2: int = Field(10, ge=1)
    lam: float = Field(1e-6, ge=0.0, allow_inf_nan=False)
    gamma: float = Field(1e-6, ge=0.0, allow_inf_nan=False)
    c_rule: CRule = "mirror"
    rank: int = Field(5, ge=1)
    init_seed: int = 0


@dataclass
class FedMAvgClient:
    index: int
    data: MaskedMatrix = field(repr=False)
    U: np.ndarray = field(repr=False)


@dataclass
class FedMAvgState:
    """Per-client U_i and the server V; W_i lives only inside a round."""

    clients: list[FedMAvgClient]
    V: np.ndarray = field(repr=False)
    params: FedMAvgParams
    round: int = 0

    @property
    def p(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class FedMAvgRound:
    round: int
    sampled: np.ndarray
    v_step_sq: float


def init_fedmavg(
    partition: ClientPartition | list[MaskedMatrix], params: FedMAvgParams
) -> FedMAvgState:
    """Same uniform [0, 1] draw order as the ADMM initializer: V⁰ first, then each U_i⁰."""
    blocks = list(getattr(partition, "blocks", partition))
    rng = np.random.default_rng(params.init_seed)
    V0 = rng.random((params.rank, blocks[0].cols))
    clients = [
        FedMAvgClient(index=i, data=block, U=rng.random((block.rows, params.rank)))
        for i, block in enumerate(blocks)
    ]
    return FedMAvgState(clients=clients, V=V0, params=params)


def u_step_denominator(V: np.ndarray, lam: float, c_rule: CRule) -> float:
    if c_rule == "mirror":
        return max(5.0 * spectral_max(V @ V.T), LIPSCHITZ_FLOOR) + lam
    return float(c_rule)


def fedmavg_U_update(
    client: FedMAvgClient,
    V: np.ndarray,
    Q1: int,
    lam: float,
    c_rule: CRule = "mirror",
    round: int | None = None,
) -> np.ndarray:
    """Q1 steps U ← U − [P_Ω(UV − M)Vᵀ + λU]/c starting from U_i^k.

    Raises:
        DivergenceError: If U turns non-finite
    """
    c = u_step_denominator(V, lam, c_rule)
    U = client.U
    for _ in range(Q1):
        U = U - (grad_U(client.data, U, V) + lam * U) / c
    if not np.all(np.isfinite(U)):
        raise DivergenceError("FedMAvg U update", round=round, client=client.index)
    return U


def fedmavg_W_update(
    client: FedMAvgClient,
    U: np.ndarray,
    V: np.ndarray,
    Q2: int,
    gamma: float,
    p: int,
    round: int | None = None,
) -> np.ndarray:
    """Q2 steps W ← W − [Uᵀ P_Ω(UW − M)/p + γW]/d from W⁰ = V^k.

    Raises:
        DivergenceError: If W turns non-finite
    """
    d = max(5.0 * spectral_max(U.T @ U), LIPSCHITZ_FLOOR)
    W = V.copy()
    for _ in range(Q2):
        W = W - (grad_V(client.data, U, W) / p + gamma * W) / d
    if not np.all(np.isfinite(W)):
        raise DivergenceError("FedMAvg W update", round=round, client=client.index)
    return W


def fedmavg_server_update(W_sampled: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the sampled clients' W, summed in the given order.

    Raises:
        DomainError: If no client was sampled
    """
    if not W_sampled:
        raise DomainError("server average needs at least one sampled client")
    total = np.zeros_like(W_sampled[0])
    for W in W_sampled:
        total += W
    return total / len(W_sampled)


def fedmavg_round(
    state: FedMAvgState, policy: SamplingPolicy, executor: Executor | None = None
) -> FedMAvgRound:
    """One FedMAvg round in place; unsampled clients are left untouched."""
    k = state.round
    params = state.params
    p = state.p
    sampled = sample_clients(policy, p, k)
    V_k = state.V.copy()
    V_k.setflags(write=False)

    def work(i: int) -> tuple[np.ndarray, np.ndarray]:
        client = state.clients[i]
        U = fedmavg_U_update(client, V_k, params.Q1, params.lam, params.c_rule, k)
        W = fedmavg_W_update(client, U, V_k, params.Q2, params.gamma, p, k)
        return U, W

    indices = [int(i) for i in sampled]
    if executor is None:
        results = [work(i) for i in indices]
    else:
        results = list(executor.map(work, indices))

    for i, (U, _) in zip(indices, results, strict=True):
        state.clients[i].U = U
    V_next = fedmavg_server_update([W for _, W in results])
    v_step_sq = float(np.vdot(V_next - V_k, V_next - V_k))
    state.V = V_next
    state.round = k + 1
    _logger.debug("FedMAvg round %d: %d clients, ‖ΔV‖² = %.3e", k + 1, len(indices), v_step_sq)
    return FedMAvgRound(round=k + 1, sampled=sampled, v_step_sq=v_step_sq)
