"""Gradient-descent solvers and the proximal response map.

One optimizer code path serves the centralized baseline, the per-user local
updates and the inner proximal subproblems. Non-smooth protection terms
(dual order 1 or inf) switch the inner solver to subgradient steps with a
1/sqrt(t) decay and best-iterate tracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costs import CostModel, LabeledDataset, gradient, local_cost
from .protection import (
    NumericError,
    ProtectionSpec,
    protection_gradient,
    robust_local_cost,
)

SCHEDULES = ("fixed", "inv-sqrt")

# Inner proximal subproblem budget relative to the outer tolerance.
PROX_INNER_ITERS = 200
PROX_TOL_FACTOR = 0.1


@dataclass(frozen=True)
class SolverConfig:
    """Step-size rule, iteration budget, stopping tolerance and seed."""

    step_size: float = 0.1
    max_iters: int = 1000
    tolerance: float = 1e-4
    seed: int = 0
    schedule: str = "fixed"

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    def step_at(self, t: int) -> float:
        """Step size for iteration t (1-based)."""
        if self.schedule == "inv-sqrt":
            return self.step_size / math.sqrt(max(t, 1))
        return self.step_size


@dataclass
class SolveTrace:
    """Iterates and costs of one solve; index 0 is the initial point."""

    iterates: list[np.ndarray] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def initial_weights(dim: int, seed: int) -> np.ndarray:
    """Shared starting point: seeded uniform(-0.05, 0.05)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.05, 0.05, size=dim)


def gd_step(
    model: CostModel,
    w: np.ndarray,
    data: LabeledDataset,
    step: float,
    extra_gradient: np.ndarray | None = None,
) -> np.ndarray:
    """One descent step w - step * (grad + extra_gradient).

    ``extra_gradient`` carries protection or proximal terms.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    g = gradient(model, w, data)
    if extra_gradient is not None:
        g = g + extra_gradient
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient", diagnostics={"weights": w})
    w_new = w - step * g
    if not np.all(np.isfinite(w_new)):
        raise NumericError("iterate overflowed", diagnostics={"step": step})
    return w_new


def solve_centralized(
    model: CostModel,
    pooled: LabeledDataset,
    config: SolverConfig,
    w0: np.ndarray | None = None,
) -> SolveTrace:
    """Gradient descent on the pooled dataset until the iterate change drops
    below the tolerance or the iteration budget runs out.

    Raises NumericError (with the partial trace attached) if the cost grows
    tenfold over its initial value.
    """
    if pooled.num_samples < 1:
        raise ValueError("pooled dataset is empty")
    if w0 is None:
        w = initial_weights(model.param_dim, config.seed)
    else:
        w = np.asarray(w0, dtype=float).copy()

    trace = SolveTrace(iterates=[w.copy()], costs=[local_cost(model, w, pooled)])
    divergence_cap = 10.0 * trace.costs[0] + 1e-9

    for t in range(1, config.max_iters + 1):
        w_new = gd_step(model, w, pooled, config.step_at(t))
        cost = local_cost(model, w_new, pooled)
        trace.iterates.append(w_new.copy())
        trace.costs.append(cost)
        trace.iterations_used = t
        if cost > divergence_cap:
            err = NumericError(
                f"centralized solve diverged at iteration {t} "
                f"(cost {cost:.3e} vs initial {trace.costs[0]:.3e})",
                diagnostics={"iteration": t, "cost": cost},
            )
            err.trace = trace
            raise err
        if np.linalg.norm(w_new - w) <= config.tolerance:
            trace.converged = True
            w = w_new
            break
        w = w_new
    return trace


def proximal_response(
    model: CostModel,
    w_prev: np.ndarray,
    anchor: np.ndarray,
    data: LabeledDataset,
    spec: ProtectionSpec,
    config: SolverConfig,
) -> np.ndarray:
    """Approximate argmin of the robust local cost plus 0.5*||w - w_prev||^2.

    The inner solve starts from ``w_prev`` (so the composite objective can
    never end above its value there), runs at most PROX_INNER_ITERS gradient
    steps at tolerance PROX_TOL_FACTOR * config.tolerance, and returns the
    best iterate seen. Smooth instances that exhaust the budget without
    converging raise NumericError.
    """
    w_prev = np.asarray(w_prev, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    nonsmooth = spec.epsilon > 0 and (spec.dual_order == 1 or math.isinf(spec.dual_order))
    tol = config.tolerance * PROX_TOL_FACTOR

    def composite(w: np.ndarray) -> float:
        return robust_local_cost(model, w, data, spec, anchor) + 0.5 * float(
            np.dot(w - w_prev, w - w_prev)
        )

    def composite_grad(w: np.ndarray) -> np.ndarray:
        g = gradient(model, w, data) + (w - w_prev)
        if spec.epsilon > 0:
            g = g - protection_gradient(spec, anchor - w)
        return g

    w = w_prev.copy()
    best_w, best_val = w.copy(), composite(w)
    converged = False
    for t in range(1, PROX_INNER_ITERS + 1):
        step = config.step_size / math.sqrt(t) if nonsmooth else config.step_size
        g = composite_grad(w)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in proximal subproblem")
        w_new = w - step * g
        if not np.all(np.isfinite(w_new)):
            raise NumericError("proximal iterate overflowed", diagnostics={"step": step})
        val = composite(w_new)
        if val < best_val:
            best_w, best_val = w_new.copy(), val
        if np.linalg.norm(w_new - w) <= tol:
            converged = True
            w = w_new
            break
        w = w_new
    if not converged and not nonsmooth:
        raise NumericError(
            "proximal subproblem did not converge",
            diagnostics={"iterations": PROX_INNER_ITERS, "tolerance": tol},
        )
    return best_w
