"""Seeded low-rank test matrices with known ground truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.data import MaskedMatrix
from src.errors import DatasetError

_logger = logging.getLogger(__name__)


class SyntheticSpec(BaseModel):
    """M = U*V* + σ·noise on a uniform ρ-density mask; U*, V* uniform on [0, 1]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    m: int = Field(ge=1)
    n: int = Field(ge=1)
    rank: int = Field(ge=1)
    density: float = Field(gt=0.0, le=1.0)
    noise: float = Field(0.0, ge=0.0, allow_inf_nan=False)
    seed: int = 0

    @model_validator(mode="after")
    def _check_shape(self) -> SyntheticSpec:
        if self.rank > min(self.m, self.n):
            raise ValueError(f"rank {self.rank} exceeds min(m, n) = {min(self.m, self.n)}")
        if self.density * self.m * self.n < 1:
            raise ValueError("density too low to observe a single entry")
        return self


@dataclass(frozen=True)
class SyntheticData:
    matrix: MaskedMatrix
    U_true: np.ndarray
    V_true: np.ndarray

    def truth_on_mask(self) -> np.ndarray:
        """Noiseless U*V* at the observed entries."""
        m = self.matrix
        return np.einsum("ij,ji->i", self.U_true[m.row_idx], self.V_true[:, m.col_idx])


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw U*, V*, the mask and the noise from one generator seeded with ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    U_true = rng.random((spec.m, spec.rank))
    V_true = rng.random((spec.rank, spec.n))

    if spec.density >= 1.0:
        observed = np.ones((spec.m, spec.n), dtype=bool)
    else:
        observed = rng.random((spec.m, spec.n)) < spec.density
        if not observed.any():
            observed.flat[rng.integers(spec.m * spec.n)] = True
    rows, cols = np.nonzero(observed)

    values = np.einsum("ij,ji->i", U_true[rows], V_true[:, cols])
    if spec.noise > 0.0:
        values = values + spec.noise * rng.standard_normal(values.size)

    matrix = MaskedMatrix.from_triplets(spec.m, spec.n, rows, cols, values)
    _logger.info(
        "Generated %dx%d rank-%d matrix, %d observed entries", spec.m, spec.n, spec.rank, matrix.nnz
    )
    return SyntheticData(matrix=matrix, U_true=U_true, V_true=V_true)


def save_synthetic(data: SyntheticData, path: PathLike | str) -> Path:
    """Write Ω triplets and ground-truth factors to a compressed ``.npz``."""
    destination = Path(path)
    destination.parent.mkdir(parents=True, exist_ok=True)
    m = data.matrix
    with destination.open("wb") as f:
        np.savez_compressed(
            f,
            shape=np.array(m.shape),
            row_idx=m.row_idx,
            col_idx=m.col_idx,
            values=m.values,
            U_true=data.U_true,
            V_true=data.V_true,
        )
    return destination


def load_synthetic(path: PathLike | str) -> SyntheticData:
    """Read back a file written by :func:`save_synthetic`.

    Raises:
        DatasetError: If the file is missing or lacks a required array
    """
    source = Path(path)
    if not source.exists():
        raise DatasetError(f"Synthetic data file not found: {source}")
    with np.load(source) as archive:
        try:
            rows, cols = (int(x) for x in archive["shape"])
            matrix = MaskedMatrix.from_triplets(
                rows, cols, archive["row_idx"], archive["col_idx"], archive["values"]
            )
            return SyntheticData(
                matrix=matrix, U_true=archive["U_true"], V_true=archive["V_true"]
            )
        except KeyError as e:
            raise DatasetError(f"{source.name} is missing array {e}") from e
