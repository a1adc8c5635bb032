"""Variational-inequality diagnostics for the federated problem.

Builds the per-user gradient mapping, the comparison matrix of minimal own
curvatures and maximal cross couplings, tests the P-matrix property by exact
principal-minor enumeration, estimates the strong-monotonicity constant, and
reports the federated-vs-centralized gap against its epsilon bound.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costs import (
    CostModel,
    LabeledDataset,
    LINEAR_REGRESSION,
    UnsupportedModelError,
    gradient,
    hessian_block,
    pool,
)
from .protection import ProtectionSpec, protection_gradient

# Exact minor enumeration caps out here; beyond it the test refuses rather
# than approximate, because a wrong verdict silently invalidates the gap
# bound's hypotheses.
P_MATRIX_MAX_SIZE = 12

GAP_SLACK = 1e-9


class MatrixSizeError(ValueError):
    """Matrix too large for exact principal-minor enumeration."""


@dataclass(frozen=True)
class UpsilonMatrix:
    """Own-curvature / cross-coupling comparison matrix.

    Diagonal holds each user's minimal Hessian eigenvalue over the sampled
    weight grid; off-diagonals hold minus the maximal cross-coupling bound.
    """

    entries: np.ndarray
    alpha_min: np.ndarray
    beta_max: np.ndarray

    @classmethod
    def from_bounds(cls, alpha_min: np.ndarray, beta_max: np.ndarray) -> "UpsilonMatrix":
        alpha_min = np.asarray(alpha_min, dtype=float)
        beta_max = np.asarray(beta_max, dtype=float)
        n = alpha_min.size
        if beta_max.shape != (n, n):
            raise ValueError(f"beta_max shape {beta_max.shape}, expected ({n}, {n})")
        if np.any(beta_max < 0) or np.any(np.diag(beta_max) != 0):
            raise ValueError("beta_max must be nonnegative with zero diagonal")
        entries = np.diag(alpha_min) - beta_max
        return cls(entries=entries, alpha_min=alpha_min, beta_max=beta_max)


@dataclass(frozen=True)
class GapReport:
    """Distance between centralized and federated solutions vs its bound."""

    delta: float
    epsilon_norm: float
    c_sm: float
    bound: float
    bound_holds: bool


def vi_mapping(
    model: CostModel,
    w: np.ndarray,
    partition: Sequence[LabeledDataset],
    specs: Sequence[ProtectionSpec] | None = None,
    anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Per-user gradients of the local costs at ``w``, stacked as rows.

    With ``specs`` given, returns the perturbed mapping instead: each row
    additionally carries the server-form protection gradient at ``w``
    relative to ``anchor``.
    """
    if not model.smooth:
        raise UnsupportedModelError(f"{model.family} has no gradient mapping")
    rows = [gradient(model, w, data) for data in partition]
    if specs is not None:
        if anchor is None:
            raise ValueError("perturbed mapping needs an anchor point")
        offset = np.asarray(anchor, dtype=float) - np.asarray(w, dtype=float)
        rows = [row - protection_gradient(spec, offset) for row, spec in zip(rows, specs)]
    return np.stack(rows)


def weight_grid(dim: int, num: int = 64, radius: float = 1.0, seed: int = 0) -> np.ndarray:
    """Seeded sample grid in a centered box, for inf/sup approximations."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-radius, radius, size=(num, dim))


def build_upsilon(
    model: CostModel,
    partition: Sequence[LabeledDataset],
    sample_grid: np.ndarray | Sequence[np.ndarray],
    specs: Sequence[ProtectionSpec] | None = None,
) -> UpsilonMatrix:
    """Comparison matrix over a sampled weight grid.

    alpha_min[n] is the smallest Hessian eigenvalue of user n's cost over the
    grid. The data terms contribute no cross-user coupling (each user
    optimizes its own copy of the weights), so beta_max[n, m] is the
    protection coupling bound epsilon_n on the unit-offset set, or zero
    without protection.
    """
    grid = np.atleast_2d(np.asarray(sample_grid, dtype=float))
    if grid.shape[0] < 1:
        raise ValueError("sample_grid must contain at least one point")
    n_users = len(partition)
    alpha_min = np.empty(n_users)
    for n, data in enumerate(partition):
        eigs = [
            np.linalg.eigvalsh(hessian_block(model, w, data))[0] for w in grid
        ]
        alpha_min[n] = min(eigs)
    beta_max = np.zeros((n_users, n_users))
    if specs is not None:
        for n, spec in enumerate(specs):
            beta_max[n, :] = spec.epsilon
            beta_max[n, n] = 0.0
    return UpsilonMatrix.from_bounds(alpha_min, beta_max)


def is_p_matrix(m: np.ndarray) -> bool:
    """True iff every principal minor of ``m`` is strictly positive.

    Exact enumeration of all 2^N - 1 minors; N > 12 raises MatrixSizeError
    (callers must subsample).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"square matrix required, got shape {m.shape}")
    n = m.shape[0]
    if n > P_MATRIX_MAX_SIZE:
        raise MatrixSizeError(
            f"exact minor enumeration supports N <= {P_MATRIX_MAX_SIZE}, got {n}"
        )
    for size in range(1, n + 1):
        for idx in itertools.combinations(range(n), size):
            sub = m[np.ix_(idx, idx)]
            if size == 1:
                minor = sub[0, 0]
            else:
                minor = np.linalg.det(sub)
            if minor <= 0:
                return False
    return True


def estimate_c_sm(
    model: CostModel,
    pooled: LabeledDataset,
    sample_grid: np.ndarray | Sequence[np.ndarray],
) -> float:
    """Strong-monotonicity constant of the pooled gradient mapping.

    Exact (smallest Hessian eigenvalue) for linear regression, whose mapping
    is affine. Otherwise the minimum monotonicity quotient
    (w1-w2).(F(w1)-F(w2)) / ||w1-w2||^2 over all grid pairs, which is an
    upper bound on the true constant and should be read as a sampled
    estimate. A nonpositive value means the mapping is not strongly monotone
    on the sampled set.
    """
    if not model.smooth:
        raise UnsupportedModelError(f"{model.family} has no gradient mapping")
    if model.family == LINEAR_REGRESSION:
        H = hessian_block(model, np.zeros(model.param_dim), pooled)
        return float(np.linalg.eigvalsh(H)[0])
    grid = np.atleast_2d(np.asarray(sample_grid, dtype=float))
    grads = [gradient(model, w, pooled) for w in grid]
    best = np.inf
    for i, j in itertools.combinations(range(grid.shape[0]), 2):
        dw = grid[i] - grid[j]
        denom = float(np.dot(dw, dw))
        if denom < 1e-24:
            continue
        quotient = float(np.dot(dw, grads[i] - grads[j])) / denom
        best = min(best, quotient)
    if not np.isfinite(best):
        raise ValueError("sample_grid needs at least two distinct points")
    return best


def gap_report(
    w_centralized: np.ndarray,
    w_federated: np.ndarray,
    epsilons: np.ndarray | Sequence[float],
    c_sm: float,
) -> GapReport:
    """Solution gap ||w_C - w_F||_2 against the bound ||eps||_2 / c_sm."""
    if c_sm <= 0:
        raise ValueError(f"c_sm must be > 0, got {c_sm}")
    delta = float(
        np.linalg.norm(np.asarray(w_centralized, dtype=float) - np.asarray(w_federated, dtype=float))
    )
    epsilon_norm = float(np.linalg.norm(np.asarray(epsilons, dtype=float)))
    bound = epsilon_norm / c_sm
    return GapReport(
        delta=delta,
        epsilon_norm=epsilon_norm,
        c_sm=c_sm,
        bound=bound,
        bound_holds=bool(delta <= bound + GAP_SLACK),
    )


@dataclass(frozen=True)
class DiagnosticsReport:
    """Bundle produced by ``run_diagnostics``: comparison matrix, P-matrix
    verdict, strong-monotonicity estimate, gap report, plus the empirical
    perturbation bound and the componentwise ordering observation."""

    upsilon: UpsilonMatrix
    p_matrix: bool
    c_sm: float
    c_sm_exact: bool
    gap: GapReport | None
    perturbation_sup: float
    componentwise_le_fraction: float

    def to_dict(self) -> dict:
        return {
            "upsilon": self.upsilon.entries.tolist(),
            "alpha_min": self.upsilon.alpha_min.tolist(),
            "beta_max": self.upsilon.beta_max.tolist(),
            "p_matrix": self.p_matrix,
            "c_sm": self.c_sm,
            "c_sm_exact": self.c_sm_exact,
            "delta": self.gap.delta if self.gap else None,
            "epsilon_norm": self.gap.epsilon_norm if self.gap else None,
            "bound": self.gap.bound if self.gap else None,
            "bound_holds": self.gap.bound_holds if self.gap else None,
            "perturbation_sup": self.perturbation_sup,
            "componentwise_le_fraction": self.componentwise_le_fraction,
        }


def run_diagnostics(
    model: CostModel,
    datasets: Sequence[LabeledDataset],
    specs: Sequence[ProtectionSpec],
    w_centralized: np.ndarray,
    w_federated: np.ndarray,
    sample_grid: np.ndarray | None = None,
    grid_seed: int = 0,
) -> DiagnosticsReport:
    """Full analysis of one solved instance.

    ``w_centralized`` and ``w_federated`` are the already-computed solutions
    (see the harness for how they are produced). The sample grid defaults to
    64 seeded points in the unit box.
    """
    if sample_grid is None:
        sample_grid = weight_grid(model.param_dim, num=64, radius=1.0, seed=grid_seed)
    pooled = pool(list(datasets))

    upsilon = build_upsilon(model, datasets, sample_grid, specs=specs)
    p_verdict = is_p_matrix(upsilon.entries)
    c_sm = estimate_c_sm(model, pooled, sample_grid)
    c_sm_exact = model.family == LINEAR_REGRESSION

    epsilons = np.array([s.epsilon for s in specs])
    gap = gap_report(w_centralized, w_federated, epsilons, c_sm) if c_sm > 0 else None

    # Empirical sup over the grid of the perturbed-minus-plain mapping norm.
    anchor = np.asarray(w_federated, dtype=float)
    sup = 0.0
    for w in np.atleast_2d(sample_grid):
        plain = vi_mapping(model, w, datasets)
        perturbed = vi_mapping(model, w, datasets, specs=specs, anchor=anchor)
        sup = max(sup, float(np.linalg.norm(perturbed - plain, axis=1).max()))

    w_c = np.asarray(w_centralized, dtype=float)
    w_f = np.asarray(w_federated, dtype=float)
    le_fraction = float(np.mean(w_c <= w_f))

    return DiagnosticsReport(
        upsilon=upsilon,
        p_matrix=p_verdict,
        c_sm=c_sm,
        c_sm_exact=c_sm_exact,
        gap=gap,
        perturbation_sup=sup,
        componentwise_le_fraction=le_fraction,
    )
