"""Using a compressed layer: forward pass, recovery gradients, cost accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import DimensionError, as_dense, column_l2_norms, frobenius_norm, sparse_dense_matmul
from .optimizer import CompressedLayer, loss_of


def apply(layer: CompressedLayer, x) -> np.ndarray:
    """``s x + u (v^T x) + bias``; the low-rank product is never formed."""
    x = as_dense(x, "x")
    m, n = layer.shape
    if x.shape[0] != n:
        raise DimensionError(f"layer expects {n} input rows, got {x.shape[0]}")
    out = sparse_dense_matmul(layer.s, x)
    if layer.rank:
        out += layer.factors.u @ (layer.factors.v.T @ x)
    if layer.bias is not None:
        out += layer.bias[:, None]
    return out


def _check_recovery_shapes(u, v, s_dense, w_ref, x):
    m, n = w_ref.shape
    if u.shape[0] != m or v.shape[0] != n or u.shape[1] != v.shape[1]:
        raise DimensionError(f"factors {u.shape}, {v.shape} do not fit weight {w_ref.shape}")
    if s_dense.shape != w_ref.shape or x.shape[0] != n:
        raise DimensionError("sparse part, reference weight and activations disagree")


def recovery_objective(u, v, s_dense, w_ref, x) -> float:
    """``||(u v^T + s - w_ref) x||_F^2`` with the sparse part held fixed."""
    err = (u @ v.T + s_dense - w_ref) @ x
    return float(np.sum(err * err))


def recovery_gradients(u, v, s_dense, w_ref, x) -> tuple[np.ndarray, np.ndarray]:
    u, v, s_dense, w_ref, x = (as_dense(a) for a in (u, v, s_dense, w_ref, x))
    _check_recovery_shapes(u, v, s_dense, w_ref, x)
    g = (u @ v.T + s_dense - w_ref) @ (x @ x.T)
    return 2.0 * g @ v, 2.0 * g.T @ u


def factor_gradients(layer: CompressedLayer, w_ref, x) -> dict:
    grad_u, grad_v = recovery_gradients(
        layer.factors.u, layer.factors.v, layer.s.to_dense(), w_ref, x
    )
    return {"grad_u": grad_u, "grad_v": grad_v}


def descend(u, v, s_dense, w_ref, x, steps: int = 50, lr: float | None = None):
    """Fixed-step gradient descent on the factors. Returns ``(u, v, objectives)``.

    Without ``lr`` the step is ``0.5 / L`` for a crude bound ``L`` on the
    gradient's Lipschitz constant, which keeps every step a descent step for
    small problems.
    """
    u, v = as_dense(u).copy(), as_dense(v).copy()
    s_dense, w_ref, x = as_dense(s_dense), as_dense(w_ref), as_dense(x)
    if lr is None:
        gram = np.linalg.norm(x @ x.T, 2)
        scale = np.linalg.norm(u, 2) ** 2 + np.linalg.norm(v, 2) ** 2
        resid = np.linalg.norm((u @ v.T + s_dense - w_ref), 2)
        lr = 0.5 / (2.0 * gram * (scale + resid) + 1e-12)
    values = [recovery_objective(u, v, s_dense, w_ref, x)]
    for _ in range(steps):
        gu, gv = recovery_gradients(u, v, s_dense, w_ref, x)
        u, v = u - lr * gu, v - lr * gv
        values.append(recovery_objective(u, v, s_dense, w_ref, x))
    return u, v, values


@dataclass(frozen=True)
class CostModel:
    """Unit-cost multiply-accumulate counts.

    ``overhead_factor`` scales sparse work to account for index handling on a
    given backend.
    """

    overhead_factor: float = 1.0

    def dense_cost(self, m: int, n: int) -> float:
        return float(m * n)

    def sparse_cost(self, nnz: int) -> float:
        return nnz * self.overhead_factor

    def lowrank_cost(self, m: int, n: int, r: int) -> float:
        return float(r * (m + n))


def speedup_from_costs(dense: float, sparse: float, lowrank: float) -> dict:
    total = sparse + lowrank
    if total <= 0:
        raise ValueError("compressed cost must be positive; an empty layer has no speedup")
    return {
        "dense": dense,
        "sparse": sparse,
        "lowrank": lowrank,
        "sum": total,
        "speedup": dense / total,
    }


def cost_report(layer: CompressedLayer, model: CostModel | None = None) -> dict:
    model = model or CostModel()
    m, n = layer.shape
    return speedup_from_costs(
        model.dense_cost(m, n),
        model.sparse_cost(layer.s.nnz),
        model.lowrank_cost(m, n, layer.rank),
    )


def reconstruction_report(layer: CompressedLayer, w, x_eval) -> dict:
    """Output error on held-out activations (channels x tokens), next to the
    diagonal surrogate computed from the same activations."""
    w = as_dense(w, "w")
    x_eval = as_dense(x_eval, "x_eval")
    if w.shape != layer.shape or x_eval.shape[0] != w.shape[1]:
        raise DimensionError("weight, layer and activation shapes disagree")
    diff = w - layer.to_dense()
    error = frobenius_norm(diff @ x_eval)
    reference = frobenius_norm(w @ x_eval)
    return {
        "frobenius_error": error,
        "relative_error": error / reference if reference > 0 else 0.0,
        "surrogate_loss": loss_of(diff, None, None, column_l2_norms(x_eval)),
    }
