"""Calibration-scaled salience, threshold masks and retention analytics.

Salience of entry ``(i, j)`` is ``(|r_ij| * norm_j) ** 2``: the diagonal
approximation of the reconstruction-loss increase caused by zeroing it.

Selection uses one threshold per matrix. Ties are broken by row-major
position, earlier coordinates first, so every mask is a deterministic prefix
of one fixed total order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import ColumnScaling, DimensionError, as_dense


@dataclass(frozen=True)
class SalienceMap:
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def total(self) -> float:
        return float(np.sum(self.values))


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray
    threshold: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.keep))

    @property
    def kept_fraction(self) -> float:
        return self.count / self.keep.size


def salience_of(residual, scaling: ColumnScaling) -> SalienceMap:
    residual = as_dense(residual, "residual")
    if residual.shape[1] != scaling.cols:
        raise DimensionError(
            f"residual has {residual.shape[1]} columns, scaling has {scaling.cols}"
        )
    scaled = np.abs(residual) * scaling.norms[None, :]
    values = scaled * scaled
    values.setflags(write=False)
    return SalienceMap(values)


def descending_order(sal: SalienceMap) -> np.ndarray:
    """Flat indices sorted by salience descending, ties by position ascending."""
    return np.argsort(-sal.values.reshape(-1), kind="stable")


def mask_top_count(sal: SalienceMap, count: int, exclude=None) -> PruneMask:
    """Keep the ``count`` most salient entries not covered by ``exclude``."""
    flat = sal.values.reshape(-1)
    order = descending_order(sal)
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != sal.shape:
            raise DimensionError(f"exclude shape {exclude.shape} != salience shape {sal.shape}")
        order = order[~exclude.reshape(-1)[order]]
    if not 0 <= count <= order.size:
        raise ValueError(f"count {count} outside [0, {order.size}]")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:count]] = True
    if count > 0:
        threshold = float(flat[order[count - 1]])
    elif order.size:
        threshold = float(flat[order[0]])
    else:
        threshold = 0.0
    return PruneMask(keep.reshape(sal.shape), threshold)


def mask_top_fraction(sal: SalienceMap, fraction: float, exclude=None) -> PruneMask:
    """Keep ``round(fraction * eligible)`` entries, eligible meaning not excluded."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    eligible = sal.size
    if exclude is not None:
        eligible -= int(np.count_nonzero(exclude))
    return mask_top_count(sal, int(round(fraction * eligible)), exclude)


def _descending_cumsum(sal: SalienceMap) -> np.ndarray:
    ordered = np.sort(sal.values.reshape(-1))[::-1]
    return np.cumsum(ordered)


def retention_curve(sal: SalienceMap, points: int) -> list[tuple[float, float]]:
    """Samples of (fraction of entries kept, fraction of salience retained)."""
    if points < 2:
        raise ValueError("points must be at least 2")
    csum = _descending_cumsum(sal)
    n = csum.size
    total = csum[-1]
    curve = []
    for i in range(points):
        count = int(round(i * n / (points - 1)))
        if total > 0:
            retained = float(csum[count - 1] / total) if count else 0.0
        else:
            retained = 1.0
        curve.append((count / n, min(retained, 1.0)))
    return curve


def fraction_for_salience(sal: SalienceMap, target_salience_fraction: float) -> float:
    """Smallest kept fraction whose top entries hold ``target`` of the salience."""
    if not 0.0 < target_salience_fraction <= 1.0:
        raise ValueError("target must lie in (0, 1]")
    csum = _descending_cumsum(sal)
    total = csum[-1]
    if total <= 0:
        return 0.0
    count = int(np.searchsorted(csum, target_salience_fraction * total, side="left")) + 1
    return min(count, csum.size) / csum.size
