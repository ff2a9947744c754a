"""Redundancy-reduction training objective on paired embedding batches.

Given two batches of embeddings Z_A, Z_B (rows are samples, columns are
embedding dimensions), the objective first mean-centers each column, then
forms the normalized cross-correlation matrix

    C[i, j] = sum_b x[b, i] * y[b, j]
              / max(||x[:, i]|| * ||y[:, j]||, eps)

and scores it with

    loss = sum_i (1 - C[i, i])**2  +  lam * sum_{i != j} C[i, j]**2 .

The diagonal ("invariance") term pulls each dimension of the two branches
into agreement; the off-diagonal ("redundancy") term decorrelates distinct
dimensions. The off-diagonal sum counts both (i, j) and (j, i); halving it
is equivalent to halving ``lam``.

All computations here run in float64 regardless of the network dtype: the
loss is a DxD reduction where accumulation error is cheap to eliminate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LAMBDA = 0.005

# Guard against zero-variance (dead) embedding dimensions, which would
# otherwise put a 0/0 in C and kill training with NaNs.
VARIANCE_GUARD = 1e-12


@dataclass
class CrossCorrelation:
    """The correlation matrix plus its loss decomposition."""

    matrix: np.ndarray  # (D, D)
    invariance: float   # sum_i (1 - C_ii)^2
    redundancy: float   # sum_{i != j} C_ij^2
    lam: float
    loss: float         # invariance + lam * redundancy

    @property
    def offdiag_mean_abs(self) -> float:
        d = self.matrix.shape[0]
        if d < 2:
            return 0.0
        off = np.abs(self.matrix).sum() - np.abs(np.diag(self.matrix)).sum()
        return float(off / (d * (d - 1)))


def center(z: np.ndarray) -> np.ndarray:
    """Subtract each column's mean; requires at least 2 rows."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need an (N>=2, D) matrix, got shape {z.shape}")
    return z - z.mean(axis=0)


def cross_correlation(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of two centered batches.

    Columns with vanishing norm fall back to the epsilon-guarded
    denominator instead of dividing by zero.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"shape mismatch: {z_a.shape} vs {z_b.shape}")
    norms_a = np.sqrt((z_a * z_a).sum(axis=0))
    norms_b = np.sqrt((z_b * z_b).sum(axis=0))
    denom = np.maximum(np.outer(norms_a, norms_b), VARIANCE_GUARD)
    return (z_a.T @ z_b) / denom


def barlow_twins_loss(c: np.ndarray, lam: float = DEFAULT_LAMBDA) -> float:
    """Scalar loss for a correlation matrix; exactly 0 iff C is identity."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"C must be square, got shape {c.shape}")
    diag = np.diag(c)
    invariance = float(((1.0 - diag) ** 2).sum())
    redundancy = float((c * c).sum() - (diag * diag).sum())
    return invariance + lam * redundancy


def correlation_summary(z_a: np.ndarray, z_b: np.ndarray, lam: float = DEFAULT_LAMBDA) -> CrossCorrelation:
    """Center both batches, correlate, and decompose the loss."""
    c = cross_correlation(center(z_a), center(z_b))
    diag = np.diag(c)
    invariance = float(((1.0 - diag) ** 2).sum())
    redundancy = float((c * c).sum() - (diag * diag).sum())
    return CrossCorrelation(
        matrix=c,
        invariance=invariance,
        redundancy=redundancy,
        lam=float(lam),
        loss=invariance + lam * redundancy,
    )


def loss_and_gradient(
    z_a: np.ndarray, z_b: np.ndarray, lam: float = DEFAULT_LAMBDA
) -> tuple[CrossCorrelation, np.ndarray, np.ndarray]:
    """Loss plus analytic gradients w.r.t. the raw (uncentered) batches.

    Differentiates the full composite map center -> correlate -> loss, so
    finite differences of that composite validate the result directly.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"shape mismatch: {z_a.shape} vs {z_b.shape}")
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows")

    x = z_a - z_a.mean(axis=0)
    y = z_b - z_b.mean(axis=0)
    norms_a = np.sqrt((x * x).sum(axis=0))
    norms_b = np.sqrt((y * y).sum(axis=0))
    outer = np.outer(norms_a, norms_b)
    denom = np.maximum(outer, VARIANCE_GUARD)
    s = x.T @ y
    c = s / denom

    diag = np.diag(c)
    invariance = float(((1.0 - diag) ** 2).sum())
    redundancy = float((c * c).sum() - (diag * diag).sum())
    loss = invariance + lam * redundancy

    # dL/dC: -2(1 - C_ii) on the diagonal, 2*lam*C_ij off it.
    g = 2.0 * lam * c
    np.fill_diagonal(g, -2.0 * (1.0 - diag))

    # Through the quotient: C = S / denom, with denom constant where the
    # guard is active (dead dimension), so those entries contribute nothing
    # through the norms.
    a = g / denom
    active = outer > VARIANCE_GUARD
    gc_active = np.where(active, g * c, 0.0)

    tiny = np.sqrt(VARIANCE_GUARD)
    d_norm_a = -gc_active.sum(axis=1) / np.maximum(norms_a, tiny)
    d_norm_a = np.where(norms_a > tiny, d_norm_a, 0.0)
    d_norm_b = -gc_active.sum(axis=0) / np.maximum(norms_b, tiny)
    d_norm_b = np.where(norms_b > tiny, d_norm_b, 0.0)

    gx = y @ a.T + x * np.where(norms_a > tiny, d_norm_a / np.maximum(norms_a, tiny), 0.0)
    gy = x @ a + y * np.where(norms_b > tiny, d_norm_b / np.maximum(norms_b, tiny), 0.0)

    # Centering Jacobian: project out the column means.
    grad_a = gx - gx.mean(axis=0)
    grad_b = gy - gy.mean(axis=0)

    summary = CrossCorrelation(
        matrix=c, invariance=invariance, redundancy=redundancy, lam=float(lam), loss=loss
    )
    return summary, grad_a, grad_b


def loss_gradient(
    z_a: np.ndarray, z_b: np.ndarray, lam: float = DEFAULT_LAMBDA
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the composite objective w.r.t. Z_A and Z_B."""
    _, grad_a, grad_b = loss_and_gradient(z_a, z_b, lam)
    return grad_a, grad_b
