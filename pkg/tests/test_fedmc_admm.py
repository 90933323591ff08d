"""Tests for the FedMC-ADMM client, server and round updates."""

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.data import MaskedMatrix, partition_clients
from src.errors import DivergenceError, InvariantError
from src.fedmc_admm import (
    BetaBound,
    ClientState,
    HyperParams,
    LipschitzTracker,
    ServerState,
    beta_lower_bound,
    dual_identity_error,
    dual_update,
    init_run,
    local_U_update,
    local_W_update,
    prime_tracker,
    run_round,
    server_update,
    verify_dual_identity,
    warn_if_beta_small,
)
from src.kernels import RegularizerSpec, grad_V, regularizer_value
from src.sampling import SamplingPolicy


def _setup(matrix: MaskedMatrix, p: int, **kwargs):
    hp = HyperParams(**kwargs)
    partition = partition_clients(matrix, p)
    server, clients = init_run(partition, hp)
    return hp, server, clients


def _snapshot(client: ClientState) -> dict[str, np.ndarray]:
    return {
        name: getattr(client, name).copy()
        for name in ("U", "W", "Y", "W_penultimate")
    }


class TestInitRun:
    def test_shapes_and_consensus(self, small_synthetic):
        hp, server, clients = _setup(small_synthetic.matrix, 4, rank=3)
        assert server.V.shape == (3, 15)
        for client in clients:
            assert client.U.shape == (client.data.rows, 3)
            assert np.array_equal(client.W, server.V)
            assert np.all((client.U >= 0) & (client.U <= 1))

    def test_dual_starts_at_negative_gradient(self, small_synthetic):
        _, _, clients = _setup(small_synthetic.matrix, 4, rank=2)
        for client in clients:
            expected = -grad_V(client.data, client.U, client.W) / 4
            assert np.allclose(client.Y, expected, atol=1e-13)
            assert dual_identity_error(client, 4) < 1e-12

    def test_seeded(self, small_synthetic):
        _, a, _ = _setup(small_synthetic.matrix, 4, init_seed=5)
        _, b, _ = _setup(small_synthetic.matrix, 4, init_seed=5)
        assert np.array_equal(a.V, b.V)


class TestLocalUpdates:
    def test_U_fixed_at_exact_fit(self):
        rng = np.random.default_rng(0)
        U, W = rng.random((3, 2)), rng.random((2, 4))
        full = U @ W
        rows, cols = np.nonzero(np.ones_like(full))
        block = MaskedMatrix.from_triplets(3, 4, rows, cols, full[rows, cols])
        client = ClientState(0, block, U, W, np.zeros_like(W), W.copy())

        update = local_U_update(client, 5, RegularizerSpec(lam=0.0, gamma=0.0))

        assert np.allclose(update.U, U, atol=1e-14)
        assert np.all(update.steps_sq < 1e-26)

    def test_U_steps_decrease_local_objective(self, toy_matrix):
        rng = np.random.default_rng(1)
        reg = RegularizerSpec(kind="l1", lam=0.05)
        U, W = rng.random((4, 2)), rng.random((2, 3))
        client = ClientState(0, toy_matrix, U, W, np.zeros_like(W), W.copy())

        def value(X):
            R = toy_matrix.mask() * (X @ W - toy_matrix.to_dense())
            return 0.5 * np.sum(R**2) + regularizer_value("l1", X, 0.05)

        before = value(U)
        after = value(local_U_update(client, 10, reg).U)
        assert after <= before

    def test_cross_ratios_only_when_tracked(self, toy_matrix):
        rng = np.random.default_rng(5)
        U, W = rng.random((4, 2)), rng.random((2, 3))
        client = ClientState(0, toy_matrix, U, W, np.zeros_like(W), W.copy())
        reg = RegularizerSpec(lam=0.1)

        plain = local_U_update(client, 4, reg)
        tracked = local_U_update(client, 4, reg, track_cross=True)

        assert plain.cross_ratios == []
        assert len(tracked.cross_ratios) == 3
        assert np.array_equal(plain.U, tracked.U)

    def test_W_step_zeroes_surrogate_gradient(self, toy_matrix):
        rng = np.random.default_rng(2)
        U, W0, V = rng.random((4, 2)), rng.random((2, 3)), rng.random((2, 3))
        Y = rng.standard_normal((2, 3))
        client = ClientState(0, toy_matrix, U, W0, Y, W0.copy())
        beta, p = 0.8, 3

        update = local_W_update(client, U, V, beta, N=1, p=p)

        L = update.L_U
        surrogate_grad = (
            grad_V(toy_matrix, U, W0) / p
            + (L / p) * (update.W - W0)
            + Y
            + beta * (update.W - V)
        )
        assert np.max(np.abs(surrogate_grad)) < 1e-10
        assert np.array_equal(update.W_penultimate, W0)

    def test_W_loop_reaches_exact_minimizer(self, toy_matrix, exact_w_solver):
        rng = np.random.default_rng(3)
        U, V = rng.random((4, 2)), rng.random((2, 3))
        Y = 0.1 * rng.standard_normal((2, 3))
        client = ClientState(0, toy_matrix, U, V.copy(), Y, V.copy())
        beta, p = 1.0, 1

        update = local_W_update(client, U, V, beta, N=400, p=p)

        expected = exact_w_solver(toy_matrix, U, V, Y, beta, p)
        assert np.allclose(update.W, expected, atol=1e-8)

    def test_W_divergence_carries_context(self, toy_matrix):
        U, V = np.ones((4, 1)), np.ones((1, 3))
        client = ClientState(3, toy_matrix, U, V.copy(), np.full((1, 3), np.inf), V.copy())
        with pytest.raises(DivergenceError) as excinfo:
            local_W_update(client, U, V, 1.0, N=2, p=1, round=7)
        assert excinfo.value.client == 3
        assert excinfo.value.round == 7


def test_dual_update_uses_given_V():
    Y, W, V = np.ones((1, 2)), np.array([[2.0, 3.0]]), np.array([[1.0, 1.0]])
    assert dual_update(Y, W, V, 0.5).tolist() == [[1.5, 2.0]]


class TestServerUpdate:
    @staticmethod
    def _clients(toy_matrix, p, rng):
        return [
            ClientState(
                i,
                toy_matrix,
                np.zeros((4, 2)),
                rng.standard_normal((2, 3)),
                rng.standard_normal((2, 3)),
                np.zeros((2, 3)),
            )
            for i in range(p)
        ]

    @pytest.mark.parametrize("kind", ["l2", "l1"])
    def test_beats_random_perturbations(self, toy_matrix, kind):
        rng = np.random.default_rng(5)
        p, beta = 3, 0.6
        reg = RegularizerSpec(kind=kind, lam=0.0, gamma=0.4)
        clients = self._clients(toy_matrix, p, rng)
        server = ServerState(V=np.zeros((2, 3)), beta=beta, p=p)

        def value(V):
            total = regularizer_value(kind, V, reg.gamma)
            for c in clients:
                total += float(np.vdot(c.Y, c.W - V)) + 0.5 * beta * float(
                    np.vdot(c.W - V, c.W - V)
                )
            return total

        V_star = server_update(server, clients, reg)
        best = value(V_star)
        for _ in range(1000):
            assert value(V_star + 1e-2 * rng.standard_normal(V_star.shape)) >= best - 1e-12

    def test_ridge_average_without_penalty(self, toy_matrix):
        rng = np.random.default_rng(6)
        clients = self._clients(toy_matrix, 2, rng)
        for c in clients:
            c.Y[:] = 0.0
        server = ServerState(V=np.zeros((2, 3)), beta=1.0, p=2)
        V = server_update(server, clients, RegularizerSpec(lam=0.0, gamma=0.0))
        assert np.allclose(V, (clients[0].W + clients[1].W) / 2, atol=1e-15)


def test_one_round_matches_dense_transcript(toy_matrix):
    """4×3, p=2, r=1, N=2, every client sampled, against straight-line dense code."""
    beta, lam, gamma, N, p = 0.7, 0.1, 0.05, 2, 2
    hp, server, clients = _setup(
        toy_matrix,
        p,
        N=N,
        beta=beta,
        reg=RegularizerSpec(lam=lam, gamma=gamma),
        rank=1,
        init_seed=4,
    )
    run_round(server, clients, SamplingPolicy(size=2), hp)

    M, mask = toy_matrix.to_dense(), toy_matrix.mask()
    rng = np.random.default_rng(4)
    V = rng.random((1, 3))
    Ms = [M[:2], M[2:]]
    masks = [mask[:2], mask[2:]]
    Us = [rng.random((2, 1)), rng.random((2, 1))]
    Ys = [-(Us[i].T @ (masks[i] * (Us[i] @ V - Ms[i]))) / p for i in range(p)]

    Ws, W_pens = [], []
    for i in range(p):
        U, W = Us[i], V.copy()
        for _ in range(N):
            L = np.linalg.norm(W @ W.T)
            G = (masks[i] * (U @ W - Ms[i])) @ W.T
            U = (L * U - G) / (L + lam)
        a = np.linalg.norm(U.T @ U) / p
        for _ in range(N):
            W_prev = W
            grad = U.T @ (masks[i] * (U @ W - Ms[i]))
            W = (a * W + beta * V - grad / p - Ys[i]) / (a + beta)
        Ys[i] = Ys[i] + beta * (W - V)
        Us[i] = U
        Ws.append(W)
        W_pens.append(W_prev)
    V_next = sum(beta * Ws[i] + Ys[i] for i in range(p)) / (p * beta + gamma)

    assert server.round == 1
    assert np.allclose(server.V, V_next, rtol=0, atol=1e-12)
    for i, client in enumerate(clients):
        assert np.allclose(client.U, Us[i], rtol=0, atol=1e-12)
        assert np.allclose(client.W, Ws[i], rtol=0, atol=1e-12)
        assert np.allclose(client.Y, Ys[i], rtol=0, atol=1e-12)
        assert np.allclose(client.W_penultimate, W_pens[i], rtol=0, atol=1e-12)


class TestRunRound:
    def test_unsampled_clients_untouched(self, small_synthetic):
        hp, server, clients = _setup(small_synthetic.matrix, 6, N=3, beta=5.0)
        policy = SamplingPolicy(size=2, seed=1)
        before = [_snapshot(c) for c in clients]

        result = run_round(server, clients, policy, hp)

        sampled = set(result.sampled.tolist())
        for client, snap in zip(clients, before, strict=True):
            if client.index in sampled:
                continue
            for name, value in snap.items():
                assert np.array_equal(getattr(client, name), value)
        assert np.all(result.descent.u_steps_sq[[i for i in range(6) if i not in sampled]] == 0)

    def test_dual_identity_holds_every_round(self, small_synthetic):
        hp, server, clients = _setup(small_synthetic.matrix, 5, N=4, beta=2.0)
        policy = SamplingPolicy(size=2, seed=2)
        for _ in range(15):
            run_round(server, clients, policy, hp)
            assert verify_dual_identity(clients, 5, server.round) <= 1e-8

    def test_corrupted_dual_is_caught(self, small_synthetic):
        hp, server, clients = _setup(small_synthetic.matrix, 3, N=2, beta=1.0)
        run_round(server, clients, SamplingPolicy(size=3), hp)
        clients[1].Y = clients[1].Y + 1.0
        with pytest.raises(InvariantError) as excinfo:
            verify_dual_identity(clients, 3, server.round)
        assert excinfo.value.client == 1

    def test_small_relative_dual_error_is_caught(self, small_synthetic):
        hp, server, clients = _setup(small_synthetic.matrix, 4, N=3, beta=50.0)
        policy = SamplingPolicy(size=2, seed=3)
        for _ in range(5):
            run_round(server, clients, policy, hp)
        assert verify_dual_identity(clients, 4, server.round) < 1e-10

        clients[0].Y = clients[0].Y * (1 + 1e-5)
        assert dual_identity_error(clients[0], 4) == pytest.approx(1e-5, rel=1e-3)
        with pytest.raises(InvariantError):
            verify_dual_identity(clients, 4, server.round)

    def test_executor_matches_serial(self, small_synthetic):
        policy = SamplingPolicy(size=3, seed=4)
        hp, serial_server, serial_clients = _setup(small_synthetic.matrix, 5, N=3, beta=3.0)
        _, pool_server, pool_clients = _setup(small_synthetic.matrix, 5, N=3, beta=3.0)
        with ThreadPoolExecutor(max_workers=3) as executor:
            for _ in range(4):
                run_round(serial_server, serial_clients, policy, hp)
                run_round(pool_server, pool_clients, policy, hp, executor=executor)
        assert np.array_equal(serial_server.V, pool_server.V)
        for a, b in zip(serial_clients, pool_clients, strict=True):
            assert np.array_equal(a.U, b.U)
            assert np.array_equal(a.Y, b.Y)

    def test_tracker_collects_estimates(self, small_synthetic):
        hp, server, clients = _setup(small_synthetic.matrix, 4, N=3, beta=3.0)
        tracker = prime_tracker(clients, hp.reg, LipschitzTracker())
        run_round(server, clients, SamplingPolicy(size=4), hp, tracker)
        assert 0 < tracker.L_U_min <= tracker.L_U_max
        assert tracker.L_cross is not None and tracker.L_cross > 0


class TestBetaBound:
    def test_formula(self):
        bound = beta_lower_bound(
            N=10, p=100, p_min=0.1, L_U_min=2.0, L_U_max=4.0, L_W_min=1.0, L_cross=3.0
        )
        assert bound.dual_term == pytest.approx(8 * 18 * 16 / (0.1 * 100 * 2.0))
        assert bound.cross_term == pytest.approx(8 * 10 * 9 / 100)
        assert bound.value == pytest.approx(min(bound.dual_term, bound.cross_term))
        assert bound.conservative == pytest.approx(max(bound.dual_term, bound.cross_term))

    def test_without_cross_estimate(self):
        bound = BetaBound(cross_term=None, dual_term=3.0)
        assert bound.value == bound.conservative == 3.0

    def test_warns_when_small(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert warn_if_beta_small(0.1, BetaBound(cross_term=None, dual_term=5.0))
        assert "below the convergence threshold" in caplog.text
        assert not warn_if_beta_small(10.0, BetaBound(cross_term=None, dual_term=5.0))


def test_hyperparams_reject_nonpositive_beta():
    with pytest.raises(ValueError):
        HyperParams(beta=0.0)
