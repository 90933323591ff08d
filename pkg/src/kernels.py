"""Proximal operators, Lipschitz rules and masked-loss gradients."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.data import residual_on_mask
from src.errors import DomainError, NumericError

if TYPE_CHECKING:
    from src.data import MaskedMatrix

RegularizerKind = Literal["l2", "l1"]

# Lower bound on L; keeps the closed-form denominators positive
# at a zero factor.
LIPSCHITZ_FLOOR = 1e-12


class RegularizerSpec(BaseModel):
    """Active regularizer pair: R_i on client factors, R on the server factor.

    ``l2`` is (λ/2)‖U_i‖² + (γ/2)‖V‖²; ``l1`` is λ‖U_i‖₁ + γ‖V‖₁.
    """

    model_config = ConfigDict(populate_by_name=True, frozen=True, extra="forbid")

    kind: RegularizerKind = "l2"
    lam: float = Field(1e-6, alias="lambda", ge=0.0, allow_inf_nan=False)
    gamma: float = Field(1e-6, ge=0.0, allow_inf_nan=False)


class LipschitzEstimates(BaseModel):
    """Frobenius-rule smoothness constants for one client at one round."""

    model_config = ConfigDict(frozen=True)

    L_W: float = Field(gt=0.0)  # of ∇_U f_i(·, W)
    L_U: float = Field(gt=0.0)  # of ∇_V f_i(U, ·)


def _require_finite(X: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(X)):
        raise NumericError(f"{name} has non-finite entries")


def soft_threshold(Q, tau: float):
    """Entrywise [|Q| − τ]₊ · sign(Q), the prox of τ‖·‖₁.

    Raises:
        DomainError: If ``tau`` is negative
    """
    if tau < 0 or math.isnan(tau):
        raise DomainError(f"threshold must be nonnegative, got {tau}")
    Q = np.asarray(Q, dtype=np.float64)
    return np.sign(Q) * np.maximum(np.abs(Q) - tau, 0.0)


def lipschitz_for_U_step(W: np.ndarray) -> float:
    """L_W = ‖W Wᵀ‖_F, floored; smoothness of U ↦ ∇_U f(U, W)."""
    _require_finite(W, "W")
    return max(float(np.linalg.norm(W @ W.T)), LIPSCHITZ_FLOOR)


def lipschitz_for_W_step(U: np.ndarray) -> float:
    """L_U = ‖UᵀU‖_F, floored; smoothness of W ↦ ∇_V f(U, W)."""
    _require_finite(U, "U")
    return max(float(np.linalg.norm(U.T @ U)), LIPSCHITZ_FLOOR)


def lipschitz_estimates(U: np.ndarray, W: np.ndarray) -> LipschitzEstimates:
    """Both Frobenius-rule constants at the pair (U, W)."""
    return LipschitzEstimates(L_W=lipschitz_for_U_step(W), L_U=lipschitz_for_W_step(U))


def spectral_max(
    A: np.ndarray, tol: float = 1e-6, max_iters: int = 200, seed: int = 0
) -> float:
    """Largest eigenvalue of a small symmetric PSD matrix by power iteration.

    Stops once ‖Ax − λx‖ ≤ tol·|λ|. The start vector comes from a fixed seed
    so repeated calls agree bit for bit.

    Raises:
        DomainError: If A is not square and symmetric within 1e-10
    """
    A = np.asarray(A, dtype=np.float64)
    _require_finite(A, "A")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.abs(A).max(initial=0.0)))
    if np.abs(A - A.T).max(initial=0.0) > 1e-10 * scale:
        raise DomainError("matrix is not symmetric")

    n = A.shape[0]
    x = np.abs(np.random.default_rng(seed).standard_normal(n)) + 1.0 / n
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iters):
        y = A @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0.0:
            return 0.0
        lam = float(x @ y)
        x_next = y / y_norm
        if np.linalg.norm(A @ x_next - lam * x_next) <= tol * abs(lam):
            lam = float(x_next @ (A @ x_next))
            break
        x = x_next
    return lam


def regularizer_value(kind: RegularizerKind, X: np.ndarray, weight: float) -> float:
    if weight == 0.0:
        return 0.0
    if kind == "l2":
        return 0.5 * weight * float(np.vdot(X, X))
    return weight * float(np.abs(X).sum())


def prox_gradient_step(
    kind: RegularizerKind, X: np.ndarray, G: np.ndarray, L: float, weight: float
) -> np.ndarray:
    """argmin_Z ⟨G, Z⟩ + (L/2)‖Z − X‖² + R(Z) for the ridge or ℓ1 regularizer."""
    if kind == "l2":
        return (L * X - G) / (L + weight)
    return soft_threshold(X - G / L, weight / L)


def masked_loss(matrix: MaskedMatrix, U: np.ndarray, W: np.ndarray) -> float:
    """f(U, W) = ½‖P_Ω(UW − M)‖²."""
    residual = residual_on_mask(matrix, U, W).values
    return 0.5 * float(residual @ residual)


def grad_U(matrix: MaskedMatrix, U: np.ndarray, W: np.ndarray) -> np.ndarray:
    """∇_U f(U, W) = P_Ω(UW − M) Wᵀ."""
    return np.asarray(residual_on_mask(matrix, U, W).csr @ W.T)


def grad_V(matrix: MaskedMatrix, U: np.ndarray, W: np.ndarray) -> np.ndarray:
    """∇_V f(U, W) = Uᵀ P_Ω(UW − M)."""
    return np.asarray(residual_on_mask(matrix, U, W).csr.T @ U).T
