"""Observed-entry matrices, rating-file ingestion, splitting and client blocking."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from scipy import sparse

from src.errors import ConfigError, DatasetError, DimensionError, EmptyDatasetError

_logger = logging.getLogger(__name__)

RatingFormat = Literal["movielens", "triplet-csv"]
PathLike = str | Path

__all__ = [
    "ClientPartition",
    "DatasetSplit",
    "MaskedMatrix",
    "load_ratings",
    "partition_clients",
    "residual_on_mask",
    "save_id_map",
    "split_train_test",
    "subsample_users",
]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _pointers(index: np.ndarray, size: int) -> np.ndarray:
    counts = np.bincount(index, minlength=size)
    ptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr


@dataclass(frozen=True, eq=False)
class MaskedMatrix:
    """Sparse matrix holding only the observed entries Ω.

    Unobserved entries are absent rather than stored as zeros, so a rating of
    0 in the input is a genuine observation. Entries are kept in row-major
    order; ``col_order`` permutes them into column-major order. Instances are
    immutable and safe to share between threads.

    Build instances with :meth:`from_triplets`; the plain constructor trusts
    its arguments.
    """

    rows: int
    cols: int
    row_idx: np.ndarray = field(repr=False)
    col_idx: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    row_ids: np.ndarray | None = field(default=None, repr=False)
    col_ids: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_triplets(
        cls,
        rows: int,
        cols: int,
        row_idx,
        col_idx,
        values,
        row_ids: np.ndarray | None = None,
        col_ids: np.ndarray | None = None,
    ) -> MaskedMatrix:
        """Validate and sort (row, col, value) triplets into a MaskedMatrix.

        Raises:
            DimensionError: If an index falls outside the shape
            DatasetError: If a (row, col) pair appears twice
        """
        r = np.asarray(row_idx, dtype=np.int64).ravel()
        c = np.asarray(col_idx, dtype=np.int64).ravel()
        v = np.asarray(values, dtype=np.float64).ravel()
        if not (r.shape == c.shape == v.shape):
            raise DimensionError("row, col and value arrays differ in length")
        if rows < 0 or cols < 0:
            raise DimensionError(f"negative shape ({rows}, {cols})")
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise DimensionError(f"entry index outside shape ({rows}, {cols})")

        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        if r.size > 1:
            dup = (r[1:] == r[:-1]) & (c[1:] == c[:-1])
            if dup.any():
                k = int(np.flatnonzero(dup)[0])
                raise DatasetError(f"duplicate entry ({r[k]}, {c[k]})")

        return cls(
            rows=int(rows),
            cols=int(cols),
            row_idx=_frozen(r),
            col_idx=_frozen(c),
            values=_frozen(v),
            row_ids=None if row_ids is None else _frozen(np.asarray(row_ids)),
            col_ids=None if col_ids is None else _frozen(np.asarray(col_ids)),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def nnz(self) -> int:
        """Number of observed entries |Ω|."""
        return int(self.values.size)

    @cached_property
    def row_ptr(self) -> np.ndarray:
        return _frozen(_pointers(self.row_idx, self.rows))

    @cached_property
    def col_order(self) -> np.ndarray:
        return _frozen(np.lexsort((self.row_idx, self.col_idx)))

    @cached_property
    def col_ptr(self) -> np.ndarray:
        return _frozen(_pointers(self.col_idx, self.cols))

    @cached_property
    def csr(self) -> sparse.csr_matrix:
        """CSR view over Ω; explicit zeros are kept as observed entries."""
        return sparse.csr_matrix(
            (self.values, self.col_idx, self.row_ptr), shape=self.shape
        )

    def row(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Observed (col, value) pairs of row ``t``."""
        lo, hi = self.row_ptr[t], self.row_ptr[t + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def col(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Observed (row, value) pairs of column ``j``."""
        picks = self.col_order[self.col_ptr[j] : self.col_ptr[j + 1]]
        return self.row_idx[picks], self.values[picks]

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        dense = np.full(self.shape, fill, dtype=np.float64)
        dense[self.row_idx, self.col_idx] = self.values
        return dense

    def mask(self) -> np.ndarray:
        """Dense boolean indicator of Ω."""
        observed = np.zeros(self.shape, dtype=bool)
        observed[self.row_idx, self.col_idx] = True
        return observed

    def with_values(self, values: np.ndarray) -> MaskedMatrix:
        """Same index set Ω carrying new values."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape != self.values.shape:
            raise DimensionError(f"expected {self.nnz} values, got {v.size}")
        return MaskedMatrix(
            self.rows,
            self.cols,
            self.row_idx,
            self.col_idx,
            _frozen(v),
            self.row_ids,
            self.col_ids,
        )

    def select(self, keep: np.ndarray) -> MaskedMatrix:
        """Sub-matrix of the entries flagged in ``keep``, same shape."""
        return MaskedMatrix(
            self.rows,
            self.cols,
            _frozen(self.row_idx[keep]),
            _frozen(self.col_idx[keep]),
            _frozen(self.values[keep]),
            self.row_ids,
            self.col_ids,
        )

    def row_block(self, start: int, stop: int) -> MaskedMatrix:
        """Rows ``start:stop`` re-indexed from zero."""
        lo, hi = self.row_ptr[start], self.row_ptr[stop]
        return MaskedMatrix(
            stop - start,
            self.cols,
            _frozen(self.row_idx[lo:hi] - start),
            self.col_idx[lo:hi],
            self.values[lo:hi],
            None if self.row_ids is None else self.row_ids[start:stop],
            self.col_ids,
        )

    def permute_rows(self, order: np.ndarray) -> MaskedMatrix:
        """Reorder rows so that new row ``t`` is old row ``order[t]``."""
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return MaskedMatrix.from_triplets(
            self.rows,
            self.cols,
            inverse[self.row_idx],
            self.col_idx,
            self.values,
            None if self.row_ids is None else self.row_ids[order],
            self.col_ids,
        )


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Disjoint train/test partition of Ω."""

    train: MaskedMatrix
    test: MaskedMatrix
    seed: int | None


@dataclass(frozen=True, eq=False)
class ClientPartition:
    """Contiguous row blocks, one per client."""

    boundaries: tuple[int, ...]
    blocks: tuple[MaskedMatrix, ...]
    row_order: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> list[int]:
        return [b - a for a, b in zip(self.boundaries, self.boundaries[1:], strict=False)]

    def split_like(self, matrix: MaskedMatrix) -> tuple[MaskedMatrix, ...]:
        """Cut another matrix over the same rows (e.g. the test side) identically."""
        if matrix.rows != self.boundaries[-1]:
            raise DimensionError(
                f"matrix has {matrix.rows} rows, partition covers {self.boundaries[-1]}"
            )
        if self.row_order is not None:
            matrix = matrix.permute_rows(self.row_order)
        return tuple(
            matrix.row_block(a, b)
            for a, b in zip(self.boundaries, self.boundaries[1:], strict=False)
        )


_PARSER_LINE = re.compile(r"line (\d+)")


def _parser_error(path: Path, error: pd.errors.ParserError) -> DatasetError:
    found = _PARSER_LINE.search(str(error))
    line = int(found.group(1)) if found else None
    return DatasetError(f"malformed record in {path.name}: {error}", line=line)


def _read_frame(path: Path, fmt: RatingFormat) -> tuple[pd.DataFrame, int]:
    """Read raw string columns; returns the frame and the line offset of row 0.

    Blank lines are read as all-missing rows so the frame index stays aligned
    with file lines; the caller drops them.
    """
    try:
        if fmt == "movielens":
            frame = pd.read_csv(
                path,
                sep="::",
                engine="python",
                header=None,
                names=["user", "item", "rating", "timestamp"],
                dtype=str,
                skip_blank_lines=False,
            )
            return frame, 1
        frame = pd.read_csv(
            path, dtype=str, skipinitialspace=True, skip_blank_lines=False
        )
    except pd.errors.EmptyDataError as e:
        raise EmptyDatasetError(f"No ratings in {path}") from e
    except pd.errors.ParserError as e:
        raise _parser_error(path, e) from e

    columns = [str(c).strip() for c in frame.columns]
    if columns[:3] != ["user", "item", "rating"]:
        raise DatasetError(
            f"Expected header 'user,item,rating' in {path}, got {','.join(columns)}",
            line=1,
        )
    frame.columns = columns
    return frame, 2


def load_ratings(path: PathLike, format: RatingFormat = "triplet-csv") -> MaskedMatrix:
    """Load a ratings file into a MaskedMatrix with compacted 0-based ids.

    User and item ids are mapped to dense indices in sorted id order; the
    original ids are kept on ``row_ids``/``col_ids``. A repeated (user, item)
    pair keeps its last occurrence.

    Args:
        path: Ratings file
        format: ``movielens`` (``user::item::rating::timestamp``) or
            ``triplet-csv`` (header ``user,item,rating``)

    Returns:
        Observed rating matrix

    Raises:
        EmptyDatasetError: If the file holds no records
        DatasetError: If a record does not parse; carries the line number
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Ratings file not found: {path}")

    frame, offset = _read_frame(path, format)
    frame = frame[~frame.isna().all(axis=1)]
    if frame.empty:
        raise EmptyDatasetError(f"No ratings in {path}")

    users = pd.to_numeric(frame["user"], errors="coerce").to_numpy(dtype=np.float64)
    items = pd.to_numeric(frame["item"], errors="coerce").to_numpy(dtype=np.float64)
    ratings = pd.to_numeric(frame["rating"], errors="coerce").to_numpy(dtype=np.float64)

    ok = (
        np.isfinite(users)
        & np.isfinite(items)
        & np.isfinite(ratings)
        & (users == np.floor(users))
        & (items == np.floor(items))
    )
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        record = ",".join(str(x) for x in frame.iloc[bad, :3].tolist())
        raise DatasetError(
            f"cannot parse record '{record}'", line=int(frame.index[bad]) + offset
        )

    keys = pd.DataFrame({"user": users.astype(np.int64), "item": items.astype(np.int64)})
    last = ~keys.duplicated(keep="last").to_numpy()
    dropped = int((~last).sum())
    if dropped:
        _logger.warning(
            "%s: %d duplicate (user, item) ratings; keeping the last occurrence",
            path.name,
            dropped,
        )

    user_ids, row_idx = np.unique(keys["user"].to_numpy()[last], return_inverse=True)
    item_ids, col_idx = np.unique(keys["item"].to_numpy()[last], return_inverse=True)
    matrix = MaskedMatrix.from_triplets(
        user_ids.size,
        item_ids.size,
        row_idx,
        col_idx,
        ratings[last],
        row_ids=user_ids,
        col_ids=item_ids,
    )
    _logger.info(
        "Loaded %s: %d users, %d items, %d ratings",
        path.name,
        matrix.rows,
        matrix.cols,
        matrix.nnz,
    )
    return matrix


def save_id_map(matrix: MaskedMatrix, path: PathLike) -> Path:
    """Persist the dense-index → original-id maps next to a run's outputs."""
    destination = Path(path)
    destination.parent.mkdir(parents=True, exist_ok=True)
    rows = matrix.row_ids if matrix.row_ids is not None else np.arange(matrix.rows)
    cols = matrix.col_ids if matrix.col_ids is not None else np.arange(matrix.cols)
    with destination.open("wb") as f:
        np.savez_compressed(f, user_ids=rows, item_ids=cols)
    return destination


def subsample_users(matrix: MaskedMatrix, count: int, seed: int | None) -> MaskedMatrix:
    """Keep ``count`` uniformly chosen users, dropping items left unrated."""
    if not 1 <= count <= matrix.rows:
        raise ConfigError(f"cannot keep {count} of {matrix.rows} users")
    if count == matrix.rows:
        return matrix

    chosen = np.sort(np.random.default_rng(seed).choice(matrix.rows, count, replace=False))
    keep_row = np.zeros(matrix.rows, dtype=bool)
    keep_row[chosen] = True
    keep = keep_row[matrix.row_idx]

    new_row = np.cumsum(keep_row) - 1
    used_cols, col_idx = np.unique(matrix.col_idx[keep], return_inverse=True)
    return MaskedMatrix.from_triplets(
        count,
        used_cols.size,
        new_row[matrix.row_idx[keep]],
        col_idx,
        matrix.values[keep],
        row_ids=None if matrix.row_ids is None else matrix.row_ids[chosen],
        col_ids=used_cols if matrix.col_ids is None else matrix.col_ids[used_cols],
    )


def split_train_test(
    matrix: MaskedMatrix, train_fraction: float = 0.8, seed: int | None = None
) -> DatasetSplit:
    """Uniform entry-level split of Ω, reproducible for a fixed seed.

    Raises:
        ConfigError: If ``train_fraction`` is not strictly between 0 and 1
        DatasetError: If fewer than two entries are observed
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if matrix.nnz < 2:
        raise DatasetError(f"need at least 2 observed entries to split, got {matrix.nnz}")

    n_train = int(np.floor(train_fraction * matrix.nnz + 0.5))
    n_train = min(max(n_train, 1), matrix.nnz - 1)
    picks = np.random.default_rng(seed).permutation(matrix.nnz)[:n_train]
    keep = np.zeros(matrix.nnz, dtype=bool)
    keep[picks] = True

    split = DatasetSplit(train=matrix.select(keep), test=matrix.select(~keep), seed=seed)
    _logger.info("Split %d ratings: %d train / %d test", matrix.nnz, split.train.nnz, split.test.nnz)
    return split


def partition_clients(
    matrix: MaskedMatrix, p: int, seed: int | None = None, shuffle: bool = False
) -> ClientPartition:
    """Split rows into ``p`` contiguous blocks whose sizes differ by at most one.

    With ``shuffle`` the rows are permuted (seeded) before blocking; the
    permutation is kept on the partition so the test side can be cut the
    same way with :meth:`ClientPartition.split_like`.
    """
    if p < 1:
        raise ConfigError(f"client count must be positive, got {p}")
    if p > matrix.rows:
        raise ConfigError(f"cannot split {matrix.rows} rows among {p} clients")

    order = None
    if shuffle:
        order = np.random.default_rng(seed).permutation(matrix.rows)
        matrix = matrix.permute_rows(order)

    base, extra = divmod(matrix.rows, p)
    sizes = [base + 1] * extra + [base] * (p - extra)
    boundaries = (0, *np.cumsum(sizes).tolist())
    blocks = tuple(
        matrix.row_block(a, b) for a, b in zip(boundaries, boundaries[1:], strict=False)
    )
    return ClientPartition(boundaries=boundaries, blocks=blocks, row_order=order)


def residual_on_mask(matrix: MaskedMatrix, U: np.ndarray, V: np.ndarray) -> MaskedMatrix:
    """P_Ω(UV − M), one r-length dot product per observed entry.

    Raises:
        DimensionError: If U is not rows×r or V is not r×cols
    """
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[0]:
        raise DimensionError(f"incompatible factors {U.shape} and {V.shape}")
    if U.shape[0] != matrix.rows or V.shape[1] != matrix.cols:
        raise DimensionError(
            f"factors {U.shape}·{V.shape} do not match matrix {matrix.shape}"
        )
    predicted = np.einsum("ij,ji->i", U[matrix.row_idx], V[:, matrix.col_idx])
    return matrix.with_values(predicted - matrix.values)
