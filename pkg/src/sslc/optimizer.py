"""Alternating sparse + low-rank compression of one weight matrix.

Each iteration fits the low-rank part to what the sparse part leaves behind,
then re-selects the sparse part from what the low-rank part leaves behind.
Both steps minimise the scaled surrogate ``||(W - L - S) diag(norms)||_F``.
A small set of the most salient weights is set aside before the loop and
merged back into the sparse part at the end.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .lowrank import DEFAULT_OVERSAMPLE, LowRankFactors, scaled_lowrank_step
from .matrix import (
    DEFAULT_EPSILON,
    ColumnScaling,
    DimensionError,
    SparseMatrix,
    as_dense,
    frobenius_norm,
    sparse_add,
    sparse_from_mask,
)
from .rng import SeededRng
from .salience import fraction_for_salience, mask_top_count, mask_top_fraction, salience_of

FORMAT_VERSION = 1
EARLY_STOP_REL = 1e-6
EARLY_STOP_PATIENCE = 3
# slack for floor() when a fraction times the entry count is an exact integer
_COUNT_SLACK = 1e-9


class InfeasiblePlanError(ValueError):
    """The requested rank and preserved share do not fit in the budget."""


class NumericalError(ArithmeticError):
    """An optimizer iterate became non-finite."""


@dataclass(frozen=True)
class CompressionPlan:
    remaining_fraction: float = 0.5
    rank: int = 128
    preserve_fraction: float = 0.01
    iterations: int = 40
    seed: int = 0
    power_iters: int = 2
    epsilon: float = DEFAULT_EPSILON
    oversample: int = DEFAULT_OVERSAMPLE
    safeguard: bool = True
    early_stop: bool = True
    # draw a fresh projection every iteration; False reuses the iteration-1 stream
    fresh_projection: bool = True
    left_projection: str = "godec"

    def validate(self, m: int, n: int) -> "Budget":
        return allocate_budget(m, n, self)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Budget:
    sparse_density: float
    lowrank_share: float
    preserve_fraction: float
    rank: int
    preserve_count: int
    sparse_count: int

    @property
    def total(self) -> float:
        return self.sparse_density + self.lowrank_share + self.preserve_fraction


def allocate_budget(m: int, n: int, plan: CompressionPlan) -> Budget:
    """Split the remaining-parameter fraction between the three parts.

    Integer entry counts are derived so the realised fraction never exceeds
    ``remaining_fraction``.
    """
    p = plan.remaining_fraction
    if not 0.0 < p <= 1.0:
        raise InfeasiblePlanError(f"remaining fraction {p} outside (0, 1]")
    if plan.rank < 0 or plan.rank > min(m, n):
        raise InfeasiblePlanError(f"rank {plan.rank} outside [0, {min(m, n)}]")
    if not 0.0 <= plan.preserve_fraction < 1.0:
        raise InfeasiblePlanError("preserve fraction must lie in [0, 1)")
    if plan.preserve_fraction >= p and plan.preserve_fraction > 0:
        raise InfeasiblePlanError("preserve fraction must be below the remaining fraction")
    if plan.iterations < 0:
        raise InfeasiblePlanError("iterations must be non-negative")
    size = m * n
    share = plan.rank * (m + n) / size
    density = p - share - plan.preserve_fraction
    if density < -_COUNT_SLACK:
        raise InfeasiblePlanError(
            f"rank {plan.rank} takes {share:.4f} of a {p:.4f} budget "
            f"with {plan.preserve_fraction:.4f} preserved"
        )
    density = max(density, 0.0)
    entries = math.floor((p - share) * size + _COUNT_SLACK)
    preserve_count = min(int(round(plan.preserve_fraction * size)), max(entries, 0))
    return Budget(
        sparse_density=density,
        lowrank_share=share,
        preserve_fraction=plan.preserve_fraction,
        rank=plan.rank,
        preserve_count=preserve_count,
        sparse_count=max(entries - preserve_count, 0),
    )


def preserve_top(w, scaling: ColumnScaling, preserve_fraction: float, count: int | None = None):
    """Split off the most salient entries of ``w``.

    Returns ``(preserved, remainder, mask)`` with ``preserved + remainder == w``.
    """
    w = as_dense(w, "w")
    if not 0.0 <= preserve_fraction < 1.0:
        raise ValueError("preserve fraction must lie in [0, 1)")
    sal = salience_of(w, scaling)
    if count is None:
        mask = mask_top_fraction(sal, preserve_fraction).keep
    else:
        mask = mask_top_count(sal, count).keep
    remainder = np.where(mask, 0.0, w)
    return sparse_from_mask(w, mask), remainder, mask


def loss_of(w, s, factors: LowRankFactors | None, scaling: ColumnScaling) -> float:
    """Scaled surrogate ``||(w - u v^T - s) diag(norms)||_F``.

    ``s`` may be a :class:`SparseMatrix`, a dense array or ``None``.
    """
    w = as_dense(w, "w")
    resid = w.copy()
    if s is not None:
        resid -= s.to_dense() if isinstance(s, SparseMatrix) else np.asarray(s, dtype=np.float64)
    if factors is not None and factors.rank:
        if factors.shape != w.shape:
            raise DimensionError(f"factors shape {factors.shape} != {w.shape}")
        resid -= factors.product()
    if resid.shape != w.shape or scaling.cols != w.shape[1]:
        raise DimensionError("shapes of w, s and scaling disagree")
    return frobenius_norm(resid * scaling.norms[None, :])


@dataclass
class ConvergenceTrace:
    """Losses after each half-step. ``e1[t]`` follows the low-rank fit, ``e2[t]`` the re-sparsify."""

    initial_loss: float = 0.0
    one_shot_loss: float = 0.0
    e1: list[float] = field(default_factory=list)
    e2: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    retries: list[int] = field(default_factory=list)
    rejected: list[bool] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def iterations(self) -> int:
        return len(self.e2)

    def interleaved(self) -> list[float]:
        out = []
        for a, b in zip(self.e1, self.e2):
            out += [a, b]
        return out

    def chain_violations(self, tol: float = 0.0) -> list[tuple[int, float]]:
        """Positions where the interleaved sequence rises by more than ``tol``."""
        seq = self.interleaved()
        return [(i, seq[i] - seq[i - 1]) for i in range(1, len(seq)) if seq[i] > seq[i - 1] + tol]

    def final_loss(self) -> float:
        return self.e2[-1] if self.e2 else self.one_shot_loss

    def to_dict(self, with_times: bool = False) -> dict:
        d = {
            "initial_loss": self.initial_loss,
            "one_shot_loss": self.one_shot_loss,
            "e1": list(self.e1),
            "e2": list(self.e2),
            "retries": list(self.retries),
            "rejected": list(self.rejected),
            "stopped_early": self.stopped_early,
        }
        if with_times:
            d["wall_times"] = list(self.wall_times)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConvergenceTrace":
        return cls(
            initial_loss=d["initial_loss"],
            one_shot_loss=d["one_shot_loss"],
            e1=list(d["e1"]),
            e2=list(d["e2"]),
            wall_times=list(d.get("wall_times", [])),
            retries=list(d["retries"]),
            rejected=list(d["rejected"]),
            stopped_early=d["stopped_early"],
        )


@dataclass(frozen=True)
class CompressedLayer:
    s: SparseMatrix
    factors: LowRankFactors
    bias: np.ndarray | None = None
    plan: CompressionPlan = field(default_factory=CompressionPlan)
    trace: ConvergenceTrace = field(default_factory=ConvergenceTrace)
    scaled_loss: float = 0.0
    preserve_count: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def shape(self) -> tuple[int, int]:
        return self.s.shape

    @property
    def rank(self) -> int:
        return self.factors.rank

    def parameter_count(self) -> int:
        m, n = self.shape
        return self.s.nnz + self.rank * (m + n)

    def parameter_fraction(self) -> float:
        m, n = self.shape
        return self.parameter_count() / (m * n)

    def to_dense(self) -> np.ndarray:
        out = self.s.to_dense()
        if self.rank:
            out += self.factors.product()
        return out

    def with_bias(self, bias) -> "CompressedLayer":
        bias = None if bias is None else np.asarray(bias, dtype=np.float64).reshape(-1)
        return replace(self, bias=bias)


def _sparse_step(residual, scaling, count, exclude):
    sal = salience_of(residual, scaling)
    keep = mask_top_count(sal, count, exclude).keep
    return np.where(keep, residual, 0.0)


def one_shot(w, scaling: ColumnScaling, plan: CompressionPlan) -> CompressedLayer:
    """Zero-iteration baseline: preserved weights plus salience pruning of the rest.

    The low-rank share of the budget goes unused; the sparse part gets the
    whole remaining fraction.
    """
    w = as_dense(w, "w")
    m, n = w.shape
    budget = allocate_budget(m, n, plan)
    preserved, remainder, excl = preserve_top(w, scaling, plan.preserve_fraction, budget.preserve_count)
    count = math.floor(plan.remaining_fraction * m * n + _COUNT_SLACK) - budget.preserve_count
    s_dense = _sparse_step(remainder, scaling, max(count, 0), excl)
    loss = loss_of(remainder, s_dense, None, scaling)
    trace = ConvergenceTrace(initial_loss=loss_of(w, None, None, scaling), one_shot_loss=loss)
    s = sparse_add(sparse_from_mask(s_dense, s_dense != 0), preserved)
    return CompressedLayer(
        s=s,
        factors=LowRankFactors.zeros(m, n, 0),
        plan=plan,
        trace=trace,
        scaled_loss=loss,
        preserve_count=preserved.nnz,
    )


def compress(w, scaling: ColumnScaling, plan: CompressionPlan) -> CompressedLayer:
    w = as_dense(w, "w")
    m, n = w.shape
    if scaling.cols != n:
        raise DimensionError(f"weight has {n} input channels, scaling has {scaling.cols}")
    budget = allocate_budget(m, n, plan)
    baseline = one_shot(w, scaling, plan)
    if plan.iterations == 0:
        return baseline

    preserved, remainder, excl = preserve_top(w, scaling, plan.preserve_fraction, budget.preserve_count)
    base_rng = SeededRng(plan.seed)
    trace = ConvergenceTrace(
        initial_loss=baseline.trace.initial_loss, one_shot_loss=baseline.trace.one_shot_loss
    )
    r = plan.rank
    factors = LowRankFactors.zeros(m, n, r)
    s_dense = np.zeros_like(w)
    prev_e2 = loss_of(remainder, None, None, scaling)
    stall = 0

    for t in range(1, plan.iterations + 1):
        start = time.perf_counter()
        retries = 0
        rejected = False
        target = remainder - s_dense
        if r == 0:
            e1 = prev_e2
        else:
            attempt_iter = t if plan.fresh_projection else 1
            candidate = scaled_lowrank_step(
                target, scaling, r, base_rng.derive(attempt_iter, 0),
                plan.power_iters, plan.left_projection, plan.oversample,
            )
            e1 = loss_of(target, None, candidate, scaling)
            if plan.safeguard and e1 > prev_e2:
                retries = 1
                candidate = scaled_lowrank_step(
                    target, scaling, r, base_rng.derive(t, 1),
                    plan.power_iters, plan.left_projection, plan.oversample,
                )
                e1 = loss_of(target, None, candidate, scaling)
                if e1 > prev_e2:
                    # keep the previous factors; the loss is then exactly the previous E2
                    rejected = True
                    candidate, e1 = factors, prev_e2
            factors = candidate
        if not math.isfinite(e1):
            raise NumericalError(f"non-finite loss after low-rank step at iteration {t}")

        lowrank_dense = factors.product() if r else 0.0
        residual = remainder - lowrank_dense
        new_s = _sparse_step(residual, scaling, budget.sparse_count, excl)
        e2 = loss_of(residual, new_s, None, scaling)
        if plan.safeguard and e2 > e1:
            # only reachable through summation-order noise: the mask step is optimal for its count
            new_s, e2 = s_dense, e1
        s_dense = new_s
        if not math.isfinite(e2):
            raise NumericalError(f"non-finite loss after sparse step at iteration {t}")

        trace.e1.append(e1)
        trace.e2.append(e2)
        trace.retries.append(retries)
        trace.rejected.append(rejected)
        trace.wall_times.append(time.perf_counter() - start)

        if t > 1 and plan.early_stop:
            stall = stall + 1 if prev_e2 - e2 < EARLY_STOP_REL * trace.e2[0] else 0
            if stall >= EARLY_STOP_PATIENCE:
                trace.stopped_early = t < plan.iterations
                prev_e2 = e2
                break
        prev_e2 = e2
        if r == 0:
            # nothing changes between iterations without a low-rank part
            break

    s = sparse_add(sparse_from_mask(s_dense, s_dense != 0), preserved)
    if r == 0:
        factors = LowRankFactors.zeros(m, n, 0)
    return CompressedLayer(
        s=s,
        factors=factors,
        plan=plan,
        trace=trace,
        scaled_loss=trace.final_loss(),
        preserve_count=preserved.nnz,
    )


def default_rank(m: int, n: int, reference_rank: int = 128, reference_width: int = 4096) -> int:
    """Rank that keeps the low-rank share near its value at the reference width."""
    return int(round(reference_rank * min(m, n) / reference_width))


def sslc_fraction_for_energy(
    w,
    scaling: ColumnScaling,
    rank: int,
    target: float = 0.8,
    seed: int = 0,
    power_iters: int = 2,
) -> dict:
    """Parameter fraction a rank-r part plus a salience-pruned residual needs
    to retain ``target`` of the scaled energy ``||w diag(norms)||_F^2``.

    The low-rank part is the first alternating step's fit of ``w``; the sparse
    part then keeps the fewest residual entries that close the gap.
    """
    w = as_dense(w, "w")
    m, n = w.shape
    total = loss_of(w, None, None, scaling) ** 2
    share = rank * (m + n) / (m * n)
    if rank:
        factors = scaled_lowrank_step(w, scaling, rank, SeededRng(seed), power_iters)
        residual = w - factors.product()
    else:
        residual = w
    resid_sal = salience_of(residual, scaling)
    resid_total = resid_sal.total()
    needed = resid_total - (1.0 - target) * total
    if needed <= 0:
        sparse_fraction = 0.0
    else:
        sparse_fraction = fraction_for_salience(resid_sal, min(needed / resid_total, 1.0))
    return {
        "lowrank_share": share,
        "sparse_fraction": sparse_fraction,
        "total_fraction": share + sparse_fraction,
        "lowrank_energy": (total - resid_total) / total if total else 0.0,
    }
