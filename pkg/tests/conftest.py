import numpy as np
import pytest

from src.data import MaskedMatrix
from src.synthetic import SyntheticSpec, generate_synthetic

TOY_ENTRIES = [
    (0, 0, 1.0),
    (0, 2, 2.0),
    (1, 1, 3.0),
    (2, 0, 4.0),
    (2, 1, 1.0),
    (3, 0, 2.0),
    (3, 2, 5.0),
]


@pytest.fixture
def toy_matrix() -> MaskedMatrix:
    """4×3 matrix with seven observed entries."""
    rows, cols, values = zip(*TOY_ENTRIES, strict=True)
    return MaskedMatrix.from_triplets(4, 3, rows, cols, values)


@pytest.fixture
def small_synthetic():
    return generate_synthetic(SyntheticSpec(m=40, n=15, rank=2, density=0.6, seed=3))


def exact_W_minimizer(
    block: MaskedMatrix,
    U: np.ndarray,
    V: np.ndarray,
    Y: np.ndarray,
    beta: float,
    p: int,
) -> np.ndarray:
    """argmin_W (1/p)f(U, W) + ⟨Y, W − V⟩ + (β/2)‖W − V‖², one r×r solve per column."""
    r = U.shape[1]
    W = np.empty_like(V)
    for j in range(block.cols):
        rows, values = block.col(j)
        Uj = U[rows]
        lhs = Uj.T @ Uj / p + beta * np.eye(r)
        rhs = Uj.T @ values / p - Y[:, j] + beta * V[:, j]
        W[:, j] = np.linalg.solve(lhs, rhs)
    return W


@pytest.fixture
def exact_w_solver():
    return exact_W_minimizer


def dense_residual(block: MaskedMatrix, U: np.ndarray, W: np.ndarray) -> np.ndarray:
    """P_Ω(UW − M) as a dense array."""
    return block.mask() * (U @ W - block.to_dense())


@pytest.fixture
def dense():
    return dense_residual
