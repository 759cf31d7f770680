import math

import numpy as np
import pytest

from sslc.lowrank import LowRankFactors, exact_truncated_svd, scaled_lowrank_step
from sslc.matrix import ColumnScaling, SparseMatrix, scale_columns
from sslc.optimizer import (
    CompressionPlan,
    ConvergenceTrace,
    InfeasiblePlanError,
    allocate_budget,
    compress,
    default_rank,
    loss_of,
    one_shot,
    preserve_top,
    sslc_fraction_for_energy,
)
from sslc.rng import SeededRng
from sslc.salience import fraction_for_salience, mask_top_count, salience_of
from sslc.synthetic import lognormal_norms, lognormal_salience_instance, planted


def pruning_loss(w, scaling, p):
    """Oracle: keep the floor(p * mn) most salient entries of w, by full sort."""
    m, n = w.shape
    sal = ((np.abs(w) * scaling.norms) ** 2).ravel()
    order = sorted(range(sal.size), key=lambda i: (-sal[i], i))
    keep = np.zeros(sal.size, bool)
    keep[order[: math.floor(p * m * n + 1e-9)]] = True
    return float(np.sqrt(np.sum(sal[~keep])))


def svd_loss(w, scaling, rank):
    """Oracle: Eckart-Young error of the scaled matrix."""
    sv = np.linalg.svd(scale_columns(w, scaling), compute_uv=False)
    return float(np.sqrt(np.sum(sv[rank:] ** 2)))


def test_budget_reference_operating_point():
    b = allocate_budget(4096, 4096, CompressionPlan(0.5, 128, 0.01))
    assert abs(b.lowrank_share - 0.0625) <= 1e-9
    assert abs(b.sparse_density - 0.4275) <= 1e-9
    assert abs(b.total - 0.5) <= 1e-9


def test_budget_pure_pruning():
    b = allocate_budget(64, 64, CompressionPlan(0.5, 0, 0.0))
    assert b.sparse_density == 0.5 and b.lowrank_share == 0.0


def test_budget_small_matrix():
    b = allocate_budget(64, 48, CompressionPlan(0.5, 4, 0.01))
    assert abs(b.sparse_density - (0.5 - 4 * 112 / 3072 - 0.01)) <= 1e-12
    assert abs(b.sparse_density - 0.3441666666666667) <= 1e-12
    assert abs(b.total - 0.5) <= 1e-9
    assert b.preserve_count == 31
    assert b.preserve_count + b.sparse_count + 4 * 112 <= 0.5 * 3072


@pytest.mark.parametrize(
    "plan",
    [
        CompressionPlan(0.5, 20, 0.01),  # rank share 0.73 > budget
        CompressionPlan(0.5, 4, 0.6),
        CompressionPlan(0.0, 0, 0.0),
        CompressionPlan(0.5, 100, 0.0),
        CompressionPlan(0.5, 4, 0.01, iterations=-1),
    ],
)
def test_budget_rejects_infeasible(plan):
    with pytest.raises(InfeasiblePlanError):
        allocate_budget(64, 48, plan)


def test_default_rank_scales_with_width():
    assert default_rank(4096, 11008) == 128
    assert default_rank(64, 48) == 2
    assert default_rank(2048, 2048) == 64


def test_preserve_zero(rng):
    w = rng.standard_normal((5, 6))
    kept, rest, mask = preserve_top(w, ColumnScaling.unit(6), 0.0)
    assert kept.nnz == 0 and np.array_equal(rest, w) and not mask.any()


def test_preserve_single_entry():
    kept, rest, _ = preserve_top(np.array([[3.0]]), ColumnScaling.unit(1), 0.99)
    assert kept.nnz == 1 and rest[0, 0] == 0.0


def test_preserve_matches_sort_oracle(rng):
    w = rng.standard_normal((10, 10))
    kept, rest, mask = preserve_top(w, ColumnScaling.unit(10), 0.05)
    top5 = sorted(range(100), key=lambda i: -abs(w.flat[i]))[:5]
    assert sorted(np.flatnonzero(mask)) == sorted(top5)
    assert np.array_equal(kept.to_dense() + rest, w)


def test_loss_examples(rng):
    w = rng.standard_normal((6, 5))
    scaling = ColumnScaling(rng.uniform(0.5, 2.0, 5))
    u = rng.standard_normal((6, 2))
    v = rng.standard_normal((5, 2))
    s = w - u @ v.T
    assert loss_of(w, s, LowRankFactors(u, v), scaling) <= 1e-12
    assert loss_of(w, None, None, scaling) == pytest.approx(np.linalg.norm(w * scaling.norms), rel=1e-15)
    mask = rng.random((6, 5)) < 0.4
    sparse = np.where(mask, w, 0.0)
    oracle = 0.0
    prod = u @ v.T
    for i in range(6):
        for j in range(5):
            oracle += ((w[i, j] - prod[i, j] - sparse[i, j]) * scaling.norms[j]) ** 2
    got = loss_of(w, sparse, LowRankFactors(u, v), scaling)
    assert abs(got - math.sqrt(oracle)) <= 1e-10


def test_zero_iterations_is_one_shot_pruning(rng):
    w = planted(seed=2)
    scaling = lognormal_norms(48, 0.5, 2)
    plan = CompressionPlan(0.5, 4, 0.01, iterations=0)
    layer = compress(w, scaling, plan)
    assert layer.rank == 0 and layer.trace.iterations == 0
    assert layer.s.nnz == math.floor(0.5 * 64 * 48)
    assert layer.scaled_loss == pytest.approx(pruning_loss(w, scaling, 0.5), rel=1e-12)


def test_exact_rank_input_is_recovered(rng):
    w = rng.standard_normal((40, 6)) @ rng.standard_normal((6, 30))
    scaling = lognormal_norms(30, 0.5, 0)
    layer = compress(w, scaling, CompressionPlan(0.6, 6, 0.0, iterations=10))
    assert layer.scaled_loss <= 1e-6 * layer.trace.initial_loss
    assert loss_of(w, layer.s, layer.factors, scaling) <= 1e-6 * layer.trace.initial_loss


def test_planted_beats_both_degenerate_baselines():
    w = planted(64, 48, rank=8, seed=0)
    scaling = lognormal_norms(48, 0.5, 100)
    layer = compress(w, scaling, CompressionPlan(0.5, 8, 0.01, iterations=40, seed=0))
    rank_matched = math.floor(0.5 * 64 * 48 / (64 + 48))
    assert rank_matched == 13
    assert layer.scaled_loss < pruning_loss(w, scaling, 0.5)
    assert layer.scaled_loss < svd_loss(w, scaling, rank_matched)


@pytest.mark.parametrize("seed", range(4))
def test_monotone_chain(seed):
    g = np.random.default_rng(seed)
    w = g.standard_normal((48, 40))
    scaling = lognormal_norms(40, 1.0, seed)
    tr = compress(w, scaling, CompressionPlan(0.5, 4, 0.01, iterations=15, seed=seed)).trace
    seq = tr.interleaved()
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert tr.chain_violations() == []
    assert seq[0] <= tr.initial_loss


def test_rank_zero_equals_salience_pruning(rng):
    w = rng.standard_normal((30, 20))
    scaling = lognormal_norms(20, 1.0, 3)
    layer = compress(w, scaling, CompressionPlan(0.5, 0, 0.01, iterations=5))
    keep = mask_top_count(salience_of(w, scaling), 300).keep
    assert np.array_equal(layer.s.to_dense(), np.where(keep, w, 0.0))
    assert layer.rank == 0


def test_single_lowrank_step_path(rng):
    w = rng.standard_normal((24, 16))
    scaling = lognormal_norms(16, 0.5, 1)
    r = 3
    p = r * (24 + 16) / (24 * 16)
    layer = compress(w, scaling, CompressionPlan(p, r, 0.0, iterations=1, seed=11))
    ref = scaled_lowrank_step(w, scaling, r, SeededRng(11), 2)
    assert layer.s.nnz == 0
    assert np.array_equal(layer.factors.u, ref.u) and np.array_equal(layer.factors.v, ref.v)


def test_budget_and_preserved_inviolable():
    w = planted(64, 48, rank=4, seed=5)
    scaling = lognormal_norms(48, 1.0, 5)
    plan = CompressionPlan(0.5, 4, 0.02, iterations=10, seed=5)
    layer = compress(w, scaling, plan)
    frac = layer.parameter_fraction()
    assert 0.5 - 1 / (64 * 48) <= frac <= 0.5 + 1e-6
    kept, _, mask = preserve_top(w, scaling, 0.02)
    dense = layer.s.to_dense()
    assert np.array_equal(dense[mask], w[mask])
    assert layer.preserve_count == kept.nnz == round(0.02 * 64 * 48)
    assert layer.scaled_loss <= layer.trace.initial_loss


def test_seed_determinism():
    w = planted(seed=9)
    scaling = lognormal_norms(48, 0.5, 9)
    plan = CompressionPlan(0.5, 6, 0.01, iterations=8, seed=123)
    a, b = compress(w, scaling, plan), compress(w, scaling, plan)
    assert np.array_equal(a.s.values, b.s.values)
    assert np.array_equal(a.s.col_indices, b.s.col_indices)
    assert np.array_equal(a.factors.u, b.factors.u)
    assert a.trace.e1 == b.trace.e1 and a.trace.e2 == b.trace.e2


def test_reused_projection_runs():
    w = planted(seed=4)
    scaling = lognormal_norms(48, 0.5, 4)
    fresh = compress(w, scaling, CompressionPlan(0.5, 8, 0.01, iterations=10, seed=1))
    reused = compress(w, scaling, CompressionPlan(0.5, 8, 0.01, iterations=10, seed=1, fresh_projection=False))
    assert reused.trace.chain_violations() == []
    assert reused.scaled_loss == pytest.approx(fresh.scaled_loss, rel=0.05)


def test_early_stop_on_converged_instance(rng):
    w = rng.standard_normal((30, 4)) @ rng.standard_normal((4, 20))
    layer = compress(w, ColumnScaling.unit(20), CompressionPlan(0.6, 4, 0.0, iterations=40))
    assert layer.trace.stopped_early
    assert layer.trace.iterations < 40


def test_trace_roundtrip():
    tr = ConvergenceTrace(1.0, 0.5, [0.4, 0.3], [0.35, 0.2], [0.1, 0.1], [0, 1], [False, True])
    back = ConvergenceTrace.from_dict(tr.to_dict(with_times=True))
    assert back == tr
    assert ConvergenceTrace(e1=[1.0, 2.0], e2=[1.5, 1.0]).chain_violations() == [(1, 0.5), (2, 0.5)]


def test_one_shot_uses_full_remaining_budget():
    w = planted(seed=1)
    layer = one_shot(w, ColumnScaling.unit(48), CompressionPlan(0.5, 8, 0.01))
    assert layer.parameter_fraction() == 0.5


def test_rate_spread_small_instance():
    w, scaling = lognormal_salience_instance(256, 192, 2.0, seed=0)
    pruning = fraction_for_salience(salience_of(w, scaling), 0.8)
    combined = sslc_fraction_for_energy(w, scaling, 4, 0.8, seed=0)
    assert combined["total_fraction"] < pruning
    assert combined["lowrank_share"] == pytest.approx(4 * 448 / (256 * 192))
