"""Sparse plus low-rank compression of weight matrices."""
from .layer import CostModel, apply, cost_report, factor_gradients, reconstruction_report
from .lowrank import LowRankFactors, brp_lowrank, exact_truncated_svd, scaled_lowrank_step
from .matrix import ColumnScaling, SparseMatrix, column_l2_norms, scale_columns, sparse_from_mask
from .optimizer import (
    CompressedLayer,
    CompressionPlan,
    ConvergenceTrace,
    allocate_budget,
    compress,
    loss_of,
    preserve_top,
)
from .rng import SeededRng
from .salience import (
    fraction_for_salience,
    mask_top_fraction,
    retention_curve,
    salience_of,
)

__version__ = "0.1.0"
