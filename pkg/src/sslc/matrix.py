"""Dense and sparse linear-algebra primitives.

Dense matrices are plain 2-D ``float64`` numpy arrays. :func:`as_dense` is the
single entry point that validates shape and finiteness. Sparse matrices use a
small immutable CSR container whose layout matches the on-disk format.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_EPSILON = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A matrix contains NaN or Inf."""


def as_dense(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite, C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class ColumnScaling:
    """Per-input-channel calibration norms, clamped below at ``epsilon``."""

    norms: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        norms = np.asarray(self.norms, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(norms)) or np.any(norms < 0):
            raise ValueError("norms must be finite and non-negative")
        norms = np.maximum(norms, self.epsilon)
        norms.setflags(write=False)
        object.__setattr__(self, "norms", norms)

    @property
    def cols(self) -> int:
        return self.norms.shape[0]

    @classmethod
    def unit(cls, cols: int, epsilon: float = DEFAULT_EPSILON) -> "ColumnScaling":
        return cls(np.ones(cols), epsilon)


def column_l2_norms(x, epsilon: float = DEFAULT_EPSILON) -> ColumnScaling:
    """Channel norms of an activation matrix laid out channels x tokens.

    The norm for input channel ``j`` is taken over row ``j`` of ``x``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = as_dense(x, "x")
    return ColumnScaling(np.sqrt(np.sum(x * x, axis=1)), epsilon)


def scale_columns(a, s: ColumnScaling, invert: bool = False) -> np.ndarray:
    a = as_dense(a, "a")
    if a.shape[1] != s.cols:
        raise DimensionError(f"matrix has {a.shape[1]} columns, scaling has {s.cols}")
    if invert:
        return a / s.norms[None, :]
    return a * s.norms[None, :]


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed sparse rows. Arrays are read-only after construction."""

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if offsets.shape != (self.rows + 1,) or offsets[0] != 0:
            raise ValueError("row_offsets must have rows+1 entries starting at 0")
        if np.any(np.diff(offsets) < 0) or offsets[-1] != cols.size or cols.size != vals.size:
            raise ValueError("row_offsets must be non-decreasing and end at nnz")
        if cols.size:
            if cols.min() < 0 or cols.max() >= self.cols:
                raise ValueError("column index out of range")
            # within-row strictly increasing: every step that is not a row start must increase
            step = np.diff(cols)
            row_start = np.zeros(cols.size, dtype=bool)
            row_start[offsets[1:-1][offsets[1:-1] < cols.size]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within a row")
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError("sparse values contain non-finite entries")
        for name, arr in (("row_offsets", offsets), ("col_indices", cols), ("values", vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def empty(cls, rows: int, cols: int) -> "SparseMatrix":
        return cls(rows, cols, np.zeros(rows + 1, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        row_ids = np.repeat(np.arange(self.rows), np.diff(self.row_offsets))
        out[row_ids, self.col_indices] = self.values
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        row_ids = np.repeat(np.arange(self.rows), np.diff(self.row_offsets))
        out[row_ids, self.col_indices] = True
        return out


def sparse_from_mask(a, mask) -> SparseMatrix:
    """Store the entries of ``a`` selected by ``mask``.

    Selected entries that happen to be exactly zero are dropped, so the stored
    pattern never contains explicit zeros.
    """
    a = as_dense(a, "a")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} != matrix shape {a.shape}")
    keep = mask & (a != 0)
    rows, cols = np.nonzero(keep)  # row-major order
    offsets = np.zeros(a.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=a.shape[0]), out=offsets[1:])
    return SparseMatrix(a.shape[0], a.shape[1], offsets, cols, a[rows, cols])


def sparse_add(a: SparseMatrix, b: SparseMatrix) -> SparseMatrix:
    """Sum of two sparse matrices with disjoint or overlapping patterns."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    c = (a.to_scipy() + b.to_scipy()).tocsr()
    c.sum_duplicates()
    c.eliminate_zeros()
    c.sort_indices()
    return SparseMatrix(a.rows, a.cols, c.indptr, c.indices, c.data)


def sparse_dense_matmul(s: SparseMatrix, x) -> np.ndarray:
    x = as_dense(x, "x")
    if s.cols != x.shape[0]:
        raise DimensionError(f"cannot multiply sparse {s.shape} by {x.shape}")
    if s.nnz == 0:
        return np.zeros((s.rows, x.shape[1]))
    return np.asarray(s.to_scipy() @ x)
