"""FedMC-ADMM: randomized block-coordinate ADMM with alternating proximal steps.

One round: the server samples S_k and broadcasts V^k; every sampled client
runs N proximal-gradient steps on U_i, then N linearized closed-form steps on
its consensus copy W_i, then the dual step Y_i += β(W_i − V^k) against the
pre-update V^k; finally the server solves its prox problem over every
client's latest (W_i, Y_i). Unsampled clients keep their state bit for bit.
"""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.data import residual_on_mask
from src.diagnostics import DescentTerms
from src.errors import DivergenceError, InvariantError
from src.kernels import (
    RegularizerSpec,
    lipschitz_estimates,
    lipschitz_for_U_step,
    lipschitz_for_W_step,
    prox_gradient_step,
    soft_threshold,
)
from src.sampling import SamplingPolicy, sample_clients

if TYPE_CHECKING:
    from src.data import ClientPartition, MaskedMatrix

_logger = logging.getLogger(__name__)

DUAL_IDENTITY_RTOL = 1e-8
AUTO_BETA_FACTOR = 2.0
# Denominator floor; below it the dual identity is checked in absolute terms.
DUAL_IDENTITY_FLOOR = 1e-4


class HyperParams(BaseModel):
    """Algorithm settings for one FedMC-ADMM run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    N: int = Field(10, ge=1)
    beta: float = Field(0.1, gt=0.0, allow_inf_nan=False)
    reg: RegularizerSpec = RegularizerSpec()
    rank: int = Field(5, ge=1)
    init_seed: int = 0
    check_invariants: bool = True


@dataclass
class ClientState:
    """Client i's private factor, consensus copy and dual variable.

    ``W_penultimate`` holds W_i^{k-1,N-1}, the second-to-last inner W iterate
    of the client's most recent local round; it and ``L_U_last`` are what the
    dual identity and the stationarity residual read back.
    """

    index: int
    data: MaskedMatrix = field(repr=False)
    U: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    W_penultimate: np.ndarray = field(repr=False)
    L_U_last: float = 0.0
    L_W_last: float = 0.0
    # ‖U^{k,l} − U^{k,l-1}‖² and ‖W^{k,l} − W^{k,l-1}‖² of the last local round
    u_steps_sq: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    w_steps_sq: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


@dataclass
class ServerState:
    V: np.ndarray = field(repr=False)
    beta: float
    p: int
    round: int = 0


@dataclass(frozen=True)
class UUpdate:
    U: np.ndarray
    steps_sq: np.ndarray
    L_W: float
    cross_ratios: list[float]


@dataclass(frozen=True)
class WUpdate:
    W: np.ndarray
    W_penultimate: np.ndarray
    steps_sq: np.ndarray
    L_U: float


@dataclass(frozen=True)
class BetaBound:
    """Both terms of the β threshold for almost-sure convergence.

    ``value`` is the smaller term. ``conservative`` is the larger one, above
    which every coefficient of the descent surrogate is positive.
    """

    cross_term: float | None
    dual_term: float

    @property
    def value(self) -> float:
        if self.cross_term is None:
            return self.dual_term
        return min(self.cross_term, self.dual_term)

    @property
    def conservative(self) -> float:
        if self.cross_term is None:
            return self.dual_term
        return max(self.cross_term, self.dual_term)

    @property
    def auto(self) -> float:
        """β chosen by ``beta = "auto"``: twice the threshold."""
        return AUTO_BETA_FACTOR * self.value


@dataclass
class LipschitzTracker:
    """Running extremes of the per-client smoothness constants.

    ``L_cross`` estimates the constant of U ↦ ∇_V f_i(U, W) from consecutive
    inner U iterates. It is a lower estimate of the true constant and only
    feeds the β threshold.
    """

    L_U_min: float = np.inf
    L_U_max: float = 0.0
    L_W_min: float = np.inf
    L_W_max: float = 0.0
    L_cross: float | None = None

    def observe_L_U(self, value: float) -> None:
        self.L_U_min = min(self.L_U_min, value)
        self.L_U_max = max(self.L_U_max, value)

    def observe_L_W(self, value: float) -> None:
        self.L_W_min = min(self.L_W_min, value)
        self.L_W_max = max(self.L_W_max, value)

    def observe_cross(self, ratios: list[float]) -> None:
        if ratios:
            self.L_cross = max(self.L_cross or 0.0, *ratios)


@dataclass(frozen=True)
class RoundResult:
    """What a finished round hands to diagnostics."""

    round: int
    sampled: np.ndarray
    v_step_sq: float
    descent: DescentTerms


def _ensure_finite(X: np.ndarray, stage: str, round: int | None, client: int | None) -> None:
    if not np.all(np.isfinite(X)):
        raise DivergenceError(stage, round=round, client=client)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0.0 else None


def init_run(
    partition: ClientPartition | list[MaskedMatrix], hp: HyperParams
) -> tuple[ServerState, list[ClientState]]:
    """Draw U_i⁰, V⁰ uniformly on [0, 1] and set W_i⁰ = V⁰, Y_i⁰ = −∇_V f_i/p."""
    blocks = list(getattr(partition, "blocks", partition))
    p = len(blocks)
    n = blocks[0].cols
    rng = np.random.default_rng(hp.init_seed)

    V0 = rng.random((hp.rank, n))
    clients = []
    for i, block in enumerate(blocks):
        U0 = rng.random((block.rows, hp.rank))
        residual = residual_csr(block, U0, V0)
        Y0 = -np.asarray(residual.T @ U0).T / p
        L0 = lipschitz_estimates(U0, V0)
        clients.append(
            ClientState(
                index=i,
                data=block,
                U=U0,
                W=V0.copy(),
                Y=Y0,
                W_penultimate=V0.copy(),
                L_U_last=L0.L_U,
                L_W_last=L0.L_W,
                u_steps_sq=np.zeros(hp.N),
                w_steps_sq=np.zeros(hp.N),
            )
        )
    server = ServerState(V=V0, beta=hp.beta, p=p)
    _logger.info("Initialised %d clients, rank %d, %d columns", p, hp.rank, n)
    return server, clients


def residual_csr(block: MaskedMatrix, U: np.ndarray, W: np.ndarray):
    """P_Ω(UW − M) as a CSR matrix."""
    return residual_on_mask(block, U, W).csr


def local_U_update(
    client: ClientState,
    N: int,
    reg: RegularizerSpec,
    round: int | None = None,
    track_cross: bool = False,
) -> UUpdate:
    """N proximal-gradient steps on U_i with W_i^k frozen.

    Each step linearizes f_i at U^{l-1} and takes the ridge-shrink or
    soft-threshold closed form with step 1/L_W, L_W = ‖W_i Wᵢᵀ‖_F. With
    ``track_cross`` the ratios feeding the L_cross estimate are collected,
    at the cost of one extra sparse product per step.
    """
    W = client.W
    L = lipschitz_for_U_step(W)
    U = client.U
    steps = np.zeros(N)
    cross: list[float] = []
    prev_grad_V = None
    prev_U = None
    for l in range(N):
        residual = residual_csr(client.data, U, W)
        G = np.asarray(residual @ W.T)
        if track_cross:
            grad_V = np.asarray(residual.T @ U).T
            if prev_grad_V is not None:
                ratio = _ratio(
                    float(np.linalg.norm(grad_V - prev_grad_V)),
                    float(np.linalg.norm(U - prev_U)),
                )
                if ratio is not None:
                    cross.append(ratio)
            prev_grad_V, prev_U = grad_V, U

        U_next = prox_gradient_step(reg.kind, U, G, L, reg.lam)
        steps[l] = float(np.vdot(U_next - U, U_next - U))
        U = U_next

    _ensure_finite(U, "local U update", round, client.index)
    return UUpdate(U=U, steps_sq=steps, L_W=L, cross_ratios=cross)


def local_W_update(
    client: ClientState,
    U: np.ndarray,
    V: np.ndarray,
    beta: float,
    N: int,
    p: int,
    round: int | None = None,
) -> WUpdate:
    """N linearized steps on W_i toward the broadcast V^k.

    W^l = (L/p·W^{l-1} + βV − ∇_V f_i(U, W^{l-1})/p − Y_i) / (L/p + β) with
    L = ‖UᵀU‖_F and U = U_i^{k+1}. Returns W^N together with W^{N-1}; the
    caller stores the latter only after the dual step.
    """
    L = lipschitz_for_W_step(U)
    a = L / p
    W = client.W
    W_prev = W
    steps = np.zeros(N)
    for l in range(N):
        grad_V = np.asarray(residual_csr(client.data, U, W).T @ U).T
        W_next = (a * W + beta * V - grad_V / p - client.Y) / (a + beta)
        steps[l] = float(np.vdot(W_next - W, W_next - W))
        W_prev, W = W, W_next

    _ensure_finite(W, "local W update", round, client.index)
    return WUpdate(W=W, W_penultimate=W_prev, steps_sq=steps, L_U=L)


def dual_update(Y: np.ndarray, W: np.ndarray, V: np.ndarray, beta: float) -> np.ndarray:
    """Y_i^{k+1} = Y_i^k + β(W_i^{k+1} − V^k), against the pre-update V^k."""
    return Y + beta * (W - V)


def server_update(
    server: ServerState, clients: list[ClientState], reg: RegularizerSpec
) -> np.ndarray:
    """Solve min_V Σ_i [⟨Y_i, W_i − V⟩ + (β/2)‖W_i − V‖²] + R(V) in closed form.

    Sums run in client-index order so results are bit-reproducible.
    """
    beta, p = server.beta, server.p
    if reg.kind == "l2":
        total = np.zeros_like(server.V)
        for client in clients:
            total += beta * client.W + client.Y
        return total / (p * beta + reg.gamma)

    total = np.zeros_like(server.V)
    for client in clients:
        total += client.W + client.Y / beta
    return soft_threshold(total / p, reg.gamma / (p * beta))


@dataclass(frozen=True)
class ClientUpdate:
    index: int
    u: UUpdate
    w: WUpdate
    Y: np.ndarray


def advance_client(
    client: ClientState,
    V: np.ndarray,
    hp: HyperParams,
    beta: float,
    p: int,
    round: int,
    track_cross: bool = False,
) -> ClientUpdate:
    """Local work of one sampled client; reads V and its own state only."""
    u = local_U_update(client, hp.N, hp.reg, round, track_cross)
    w = local_W_update(client, u.U, V, beta, hp.N, p, round)
    Y = dual_update(client.Y, w.W, V, beta)
    _ensure_finite(Y, "dual update", round, client.index)
    return ClientUpdate(index=client.index, u=u, w=w, Y=Y)


def _commit(client: ClientState, update: ClientUpdate) -> None:
    client.U = update.u.U
    client.W = update.w.W
    client.Y = update.Y
    # written after the dual step has consumed V^k
    client.W_penultimate = update.w.W_penultimate
    client.L_U_last = update.w.L_U
    client.L_W_last = update.u.L_W
    client.u_steps_sq = update.u.steps_sq
    client.w_steps_sq = update.w.steps_sq


def dual_identity_error(client: ClientState, p: int) -> float:
    """Relative residual of Y_i = −[∇_V f_i(U_i, W̃) + L_U(W_i − W̃)]/p, W̃ = W_penultimate.

    ‖Y − rhs‖ / max(‖Y‖, ‖rhs‖, DUAL_IDENTITY_FLOOR). The floor covers a client
    whose U_i was thresholded to zero: its dual then collapses to rounding
    size through cancellation in the dual step.
    """
    residual = residual_csr(client.data, client.U, client.W_penultimate)
    grad_V = np.asarray(residual.T @ client.U).T
    rhs = -(grad_V + client.L_U_last * (client.W - client.W_penultimate)) / p
    scale = max(np.linalg.norm(client.Y), np.linalg.norm(rhs), DUAL_IDENTITY_FLOOR)
    return float(np.linalg.norm(client.Y - rhs) / scale)


def verify_dual_identity(
    clients: list[ClientState], p: int, round: int, rtol: float = DUAL_IDENTITY_RTOL
) -> float:
    """Check the dual identity for every client; returns the worst relative error.

    Raises:
        InvariantError: If any client exceeds ``rtol``
    """
    worst = 0.0
    for client in clients:
        err = dual_identity_error(client, p)
        if err > rtol:
            raise InvariantError(round, client.index, err)
        worst = max(worst, err)
    return worst


def run_round(
    server: ServerState,
    clients: list[ClientState],
    policy: SamplingPolicy,
    hp: HyperParams,
    tracker: LipschitzTracker | None = None,
    executor: Executor | None = None,
) -> RoundResult:
    """Execute round k of FedMC-ADMM in place and advance k.

    Sampled clients only read the broadcast V^k and write their own state,
    so they may run on ``executor``; results are committed in client order.
    """
    k = server.round
    p = server.p
    sampled = sample_clients(policy, p, k)
    V_k = server.V.copy()
    V_k.setflags(write=False)
    track = tracker is not None

    def work(i: int) -> ClientUpdate:
        return advance_client(clients[i], V_k, hp, server.beta, p, k, track)

    if executor is None:
        updates = [work(int(i)) for i in sampled]
    else:
        updates = list(executor.map(work, [int(i) for i in sampled]))

    L_U_before = np.array([c.L_U_last for c in clients])
    sampled_mask = np.zeros(p, dtype=bool)
    sampled_mask[sampled] = True
    for update in updates:
        _commit(clients[update.index], update)
        if tracker is not None:
            tracker.observe_L_W(update.u.L_W)
            tracker.observe_L_U(update.w.L_U)
            tracker.observe_cross(update.u.cross_ratios)

    V_next = server_update(server, clients, hp.reg)
    _ensure_finite(V_next, "server update", k, None)
    v_step_sq = float(np.vdot(V_next - V_k, V_next - V_k))
    server.V = V_next
    server.round = k + 1

    if hp.check_invariants:
        verify_dual_identity(clients, p, k + 1)

    u_steps = np.stack(
        [c.u_steps_sq if sampled_mask[c.index] else np.zeros(hp.N) for c in clients]
    )
    descent = DescentTerms(
        round=k + 1,
        v_step_sq=v_step_sq,
        u_steps_sq=u_steps,
        w_steps_sq=np.stack([c.w_steps_sq for c in clients]),
        L_W=np.array([c.L_W_last for c in clients]),
        L_U_new=np.array([c.L_U_last for c in clients]),
        L_U_old=L_U_before,
    )
    _logger.debug("Round %d: %d clients, ‖ΔV‖² = %.3e", k + 1, sampled.size, v_step_sq)
    return RoundResult(round=k + 1, sampled=sampled, v_step_sq=v_step_sq, descent=descent)


def prime_tracker(
    clients: list[ClientState], reg: RegularizerSpec, tracker: LipschitzTracker
) -> LipschitzTracker:
    """Round-0 Lipschitz estimates, with L_cross from one virtual U step per client."""
    for client in clients:
        tracker.observe_L_U(client.L_U_last)
        tracker.observe_L_W(client.L_W_last)
        residual = residual_csr(client.data, client.U, client.W)
        G = np.asarray(residual @ client.W.T)
        grad_V = np.asarray(residual.T @ client.U).T
        U_bar = prox_gradient_step(reg.kind, client.U, G, client.L_W_last, reg.lam)
        residual_bar = residual_csr(client.data, U_bar, client.W)
        grad_V_bar = np.asarray(residual_bar.T @ U_bar).T
        ratio = _ratio(
            float(np.linalg.norm(grad_V_bar - grad_V)),
            float(np.linalg.norm(U_bar - client.U)),
        )
        if ratio is not None:
            tracker.observe_cross([ratio])
    return tracker


def beta_lower_bound(
    N: int,
    p: int,
    p_min: float,
    L_U_min: float,
    L_U_max: float,
    L_W_min: float,
    L_cross: float | None,
) -> BetaBound:
    """Threshold min{8NL²/(p·L̲_W), 8(8+N)L̄_U²/(p_min·p·L̲_U)} on β.

    Args:
        N: Inner iterations per local loop
        p: Number of clients
        p_min: Smallest per-client inclusion probability
        L_U_min, L_U_max: Running extremes of L_U = ‖UᵀU‖_F
        L_W_min: Running minimum of L_W = ‖WWᵀ‖_F
        L_cross: Estimate of the U-Lipschitz constant of ∇_V f_i, if any
    """
    dual_term = 8.0 * (8 + N) * L_U_max**2 / (p_min * p * L_U_min)
    cross_term = None
    if L_cross is not None:
        cross_term = 8.0 * N * L_cross**2 / (p * L_W_min)
    return BetaBound(cross_term=cross_term, dual_term=dual_term)


def bound_from_tracker(
    tracker: LipschitzTracker, N: int, p: int, p_min: float
) -> BetaBound:
    return beta_lower_bound(
        N, p, p_min, tracker.L_U_min, tracker.L_U_max, tracker.L_W_min, tracker.L_cross
    )


def warn_if_beta_small(beta: float, bound: BetaBound) -> bool:
    """Log a warning when β sits below the convergence threshold; True if it does."""
    if beta < bound.value:
        _logger.warning(
            "beta=%.4g is below the convergence threshold %.4g "
            "(conservative descent threshold %.4g)",
            beta,
            bound.value,
            bound.conservative,
        )
        return True
    return False
