"""Tests for proximal operators, Lipschitz rules and gradients."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import DomainError, NumericError
from src.kernels import (
    LIPSCHITZ_FLOOR,
    RegularizerSpec,
    grad_U,
    grad_V,
    lipschitz_estimates,
    lipschitz_for_U_step,
    lipschitz_for_W_step,
    masked_loss,
    prox_gradient_step,
    regularizer_value,
    soft_threshold,
    spectral_max,
)


class TestSoftThreshold:
    def test_known_values(self):
        out = soft_threshold(np.array([3.0, -0.5, 0.2, -4.0]), 1.0)
        assert out.tolist() == [2.0, 0.0, 0.0, -3.0]

    def test_zero_threshold_is_identity(self):
        Q = np.random.default_rng(1).standard_normal((3, 4))
        assert np.array_equal(soft_threshold(Q, 0.0), Q)

    def test_negative_threshold(self):
        with pytest.raises(DomainError):
            soft_threshold(np.ones(2), -0.1)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.uniform(-3, 3, size=6)
        tau = rng.uniform(0, 2)
        grid = np.linspace(-5, 5, 200001)
        brute = []
        for qi in q:
            cost = 0.5 * (grid - qi) ** 2 + tau * np.abs(grid)
            brute.append(grid[np.argmin(cost)])
        # grid spacing 5e-5 bounds the brute-force error
        assert np.allclose(soft_threshold(q, tau), brute, atol=5e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_optimality_condition(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.uniform(-3, 3, size=50)
        tau = rng.uniform(0, 2)
        x = soft_threshold(q, tau)
        nonzero = x != 0
        assert np.allclose(x[nonzero] - q[nonzero] + tau * np.sign(x[nonzero]), 0.0, atol=1e-9)
        assert np.all(np.abs(q[~nonzero]) <= tau + 1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_nonexpansive(self, seed):
        rng = np.random.default_rng(seed)
        Q, Q_other = rng.standard_normal((2, 8, 5)) * rng.uniform(0.1, 10)
        tau = rng.uniform(0, 3)
        moved = np.linalg.norm(soft_threshold(Q, tau) - soft_threshold(Q_other, tau))
        assert moved <= np.linalg.norm(Q - Q_other) * (1 + 1e-12)


class TestLipschitz:
    def test_identity_rows(self):
        assert lipschitz_for_U_step(np.eye(3)) == pytest.approx(np.sqrt(3))
        assert lipschitz_for_W_step(np.eye(2)) == pytest.approx(np.sqrt(2))

    def test_estimates_pair(self):
        U, W = np.eye(2), np.eye(3)[:2]
        estimates = lipschitz_estimates(U, W)
        assert estimates.L_U == pytest.approx(np.sqrt(2))
        assert estimates.L_W == pytest.approx(np.sqrt(2))

    def test_zero_factor_is_floored(self):
        assert lipschitz_for_U_step(np.zeros((2, 5))) == LIPSCHITZ_FLOOR
        assert lipschitz_for_W_step(np.zeros((4, 2))) == LIPSCHITZ_FLOOR

    def test_non_finite(self):
        W = np.ones((2, 2))
        W[0, 0] = np.nan
        with pytest.raises(NumericError):
            lipschitz_for_U_step(W)

    def test_bounds_gradient_growth(self, toy_matrix):
        rng = np.random.default_rng(4)
        W = rng.random((2, 3))
        L = lipschitz_for_U_step(W)
        for _ in range(20):
            U1, U2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
            diff = np.linalg.norm(grad_U(toy_matrix, U1, W) - grad_U(toy_matrix, U2, W))
            assert diff <= L * np.linalg.norm(U1 - U2) + 1e-12


class TestSpectralMax:
    def test_diagonal(self):
        assert spectral_max(np.diag([1.0, 5.0, 3.0])) == pytest.approx(5.0, rel=1e-6)

    def test_matches_eigvalsh(self):
        A = np.random.default_rng(2).standard_normal((6, 6))
        A = A @ A.T
        assert spectral_max(A, tol=1e-10, max_iters=5000) == pytest.approx(
            np.linalg.eigvalsh(A)[-1], rel=1e-6
        )

    def test_zero_matrix(self):
        assert spectral_max(np.zeros((3, 3))) == 0.0

    def test_deterministic(self):
        A = np.array([[2.0, 1.0], [1.0, 2.0]])
        assert spectral_max(A) == spectral_max(A)

    def test_rejects_asymmetric(self):
        with pytest.raises(DomainError):
            spectral_max(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestProxStep:
    def test_ridge_zero_gradient_shrinks(self):
        X = np.ones((2, 2))
        out = prox_gradient_step("l2", X, np.zeros_like(X), 1.0, 1.0)
        assert np.allclose(out, 0.5)

    def test_l1_dead_zone(self):
        X = np.full((2, 2), 0.1)
        out = prox_gradient_step("l1", X, np.zeros_like(X), 1.0, 0.5)
        assert np.all(out == 0.0)

    @pytest.mark.parametrize("kind", ["l2", "l1"])
    def test_minimizes_surrogate(self, kind):
        rng = np.random.default_rng(7)
        X, G = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        L, weight = 2.5, 0.3

        def surrogate(Z):
            return (
                float(np.vdot(G, Z))
                + 0.5 * L * float(np.vdot(Z - X, Z - X))
                + regularizer_value(kind, Z, weight)
            )

        Z = prox_gradient_step(kind, X, G, L, weight)
        best = surrogate(Z)
        for _ in range(500):
            assert surrogate(Z + 1e-3 * rng.standard_normal(Z.shape)) >= best - 1e-12


def test_regularizer_values():
    X = np.array([[1.0, -2.0]])
    assert regularizer_value("l2", X, 2.0) == pytest.approx(5.0)
    assert regularizer_value("l1", X, 2.0) == pytest.approx(6.0)
    assert regularizer_value("l1", X, 0.0) == 0.0


def test_gradients_match_dense(toy_matrix, dense):
    rng = np.random.default_rng(3)
    U, W = rng.random((4, 2)), rng.random((2, 3))
    R = dense(toy_matrix, U, W)
    assert np.allclose(grad_U(toy_matrix, U, W), R @ W.T, atol=1e-12)
    assert np.allclose(grad_V(toy_matrix, U, W), U.T @ R, atol=1e-12)
    assert masked_loss(toy_matrix, U, W) == pytest.approx(0.5 * np.sum(R**2), abs=1e-12)


class TestRegularizerSpec:
    def test_lambda_alias(self):
        spec = RegularizerSpec.model_validate({"kind": "l1", "lambda": 0.1, "gamma": 0.2})
        assert spec.lam == 0.1

    def test_negative_weight(self):
        with pytest.raises(ValidationError):
            RegularizerSpec(lam=-1.0)
