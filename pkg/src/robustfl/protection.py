"""Uncertainty regions, protection functions and worst-case values.

The unknown cross-user coupling is modelled as a nominal part plus a
perturbation trapped in a p-norm ball of radius epsilon. Its worst case over
the ball reduces, for linear couplings, to ``epsilon * ||.||_q + delta`` with
q the dual norm order. That closed form is the protection function used to
regularize each user's local objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .costs import CostModel, LabeledDataset, gradient, local_cost

# Below this, a gradient is treated as zero when normalizing directions.
_TINY_NORM = 1e-12


class NumericError(RuntimeError):
    """Raised when an iterative routine fails to produce a usable result."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def dual_norm_order(p: float) -> float:
    """Conjugate exponent q with 1/p + 1/q = 1; p=1 -> inf, p=inf -> 1."""
    if p < 1:
        raise ValueError(f"norm order must satisfy p >= 1, got {p}")
    if p == 1:
        return math.inf
    if math.isinf(p):
        return 1.0
    return p / (p - 1.0)


@dataclass(frozen=True)
class ProtectionSpec:
    """Uncertainty-region parameters for one user: p-norm ball of radius
    ``epsilon`` plus an independent bounded offset ``delta``."""

    p: float
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    @property
    def dual_order(self) -> float:
        return dual_norm_order(self.p)


@dataclass(frozen=True)
class UncertainFunction:
    """Nominal coupling values plus the region bounding their perturbation."""

    nominal: np.ndarray
    bound: ProtectionSpec

    def __post_init__(self):
        object.__setattr__(self, "nominal", np.asarray(self.nominal, dtype=float))


def protection_term(spec: ProtectionSpec, w_other: np.ndarray) -> float:
    """epsilon * ||w_other||_q + delta, the worst case of a linear coupling."""
    w_other = np.asarray(w_other, dtype=float)
    return float(spec.epsilon * np.linalg.norm(w_other, ord=spec.dual_order) + spec.delta)


def dual_norm_gradient(v: np.ndarray, q: float) -> np.ndarray:
    """(Sub)gradient of ``x -> ||x||_q`` at ``v``; zero at the origin."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, ord=q)
    if norm < _TINY_NORM:
        return np.zeros_like(v)
    if q == 2:
        return v / norm
    if q == 1:
        return np.sign(v)
    if math.isinf(q):
        g = np.zeros_like(v)
        j = int(np.argmax(np.abs(v)))
        g[j] = np.sign(v[j])
        return g
    return np.sign(v) * np.abs(v) ** (q - 1.0) / norm ** (q - 1.0)


def protection_gradient(spec: ProtectionSpec, w_other: np.ndarray) -> np.ndarray:
    """Gradient of ``protection_term`` with respect to ``w_other``."""
    if spec.epsilon == 0.0:
        return np.zeros_like(np.asarray(w_other, dtype=float))
    return spec.epsilon * dual_norm_gradient(w_other, spec.dual_order)


def robust_local_cost(
    model: CostModel,
    w_self: np.ndarray,
    data: LabeledDataset,
    spec: ProtectionSpec,
    anchor: np.ndarray,
    form: str = "server",
) -> float:
    """Local cost plus the protection function.

    ``form="server"`` penalizes the offset from the broadcast average:
    cost + epsilon * ||anchor - w_self||_q + delta. ``form="direct"`` applies
    the protection to the stacked other-user weights held in ``anchor``
    directly, independent of ``w_self``.
    """
    anchor = np.asarray(anchor, dtype=float)
    base = local_cost(model, w_self, data)
    if form == "server":
        if anchor.shape != np.asarray(w_self).shape:
            raise ValueError(
                f"anchor shape {anchor.shape} does not match weights "
                f"{np.asarray(w_self).shape}"
            )
        return base + protection_term(spec, anchor - np.asarray(w_self, dtype=float))
    if form == "direct":
        return base + protection_term(spec, anchor)
    raise ValueError(f"unknown protection form {form!r}")


def robust_local_gradient(
    model: CostModel,
    w_self: np.ndarray,
    data: LabeledDataset,
    spec: ProtectionSpec,
    anchor: np.ndarray,
) -> np.ndarray:
    """Gradient of the server-form robust cost with respect to ``w_self``."""
    g = gradient(model, w_self, data)
    if spec.epsilon == 0.0:
        return g
    offset = np.asarray(anchor, dtype=float) - np.asarray(w_self, dtype=float)
    return g - protection_gradient(spec, offset)


def inner_maximizer(
    grad_wrt_f: np.ndarray, nominal: np.ndarray, epsilon: float
) -> np.ndarray:
    """Worst-case point of an L2 uncertainty ball: nominal plus ``epsilon``
    times the normalized coupling gradient. Returns the nominal point when
    the gradient vanishes (flat objective, no informative direction)."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    g = np.asarray(grad_wrt_f, dtype=float)
    nominal = np.asarray(nominal, dtype=float)
    norm = np.linalg.norm(g)
    if norm < _TINY_NORM or epsilon == 0.0:
        return nominal.copy()
    return nominal + epsilon * g / norm


def project_p_ball(v: np.ndarray, p: float, radius: float) -> np.ndarray:
    """Pull ``v`` back onto the p-norm ball by radial scaling.

    Exact for the feasibility constraint (p-norms are positively homogeneous,
    so the scale factor is radius / ||v||_p in closed form); it is not the
    Euclidean projection for p != 2.
    """
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, ord=p)
    if norm <= radius or norm < _TINY_NORM:
        return v
    return v * (radius / norm)


def worst_case_value(
    model: CostModel,
    w_self: np.ndarray,
    data: LabeledDataset,
    uf: UncertainFunction,
    coupling: np.ndarray | Callable[[np.ndarray], float] | None = None,
    coupling_grad: Callable[[np.ndarray], np.ndarray] | None = None,
    max_iters: int = 500,
    tol: float = 1e-8,
) -> float:
    """Maximum of the coupled cost over the uncertainty ball.

    ``coupling`` describes how the uncertain vector f enters the cost:

    - a coefficient vector c (or None for the all-ones aggregate) means the
      additive form cost + c.f, whose worst case has the dual-norm closed
      form epsilon * ||c||_q (plus delta for the independent offset);
    - a callable g(f) is handled by projected gradient ascent over the ball,
      with ``coupling_grad`` or central finite differences supplying ascent
      directions.
    """
    spec = uf.bound
    base = local_cost(model, w_self, data)
    nominal = uf.nominal

    if coupling is None or not callable(coupling):
        c = np.ones_like(nominal) if coupling is None else np.asarray(coupling, dtype=float)
        if c.shape != nominal.shape:
            raise ValueError(f"coupling shape {c.shape} vs nominal {nominal.shape}")
        return base + float(c @ nominal) + protection_term(spec, c)

    def value(f_hat: np.ndarray) -> float:
        return float(coupling(nominal + f_hat))

    if coupling_grad is not None:
        grad = lambda f_hat: np.asarray(coupling_grad(nominal + f_hat), dtype=float)
    else:
        def grad(f_hat: np.ndarray, h: float = 1e-6) -> np.ndarray:
            g = np.zeros_like(nominal)
            for i in range(nominal.size):
                e = np.zeros_like(nominal)
                e[i] = h
                g[i] = (value(f_hat + e) - value(f_hat - e)) / (2 * h)
            return g

    if spec.epsilon == 0.0:
        return base + value(np.zeros_like(nominal)) + spec.delta

    f_hat = np.zeros_like(nominal)
    best_val = value(f_hat)
    step = spec.epsilon
    converged = False
    for _ in range(max_iters):
        candidate = project_p_ball(f_hat + step * grad(f_hat), spec.p, spec.epsilon)
        cand_val = value(candidate)
        if cand_val < best_val - 1e-15:
            step *= 0.5  # overshoot on a concave objective: shrink
            if step < _TINY_NORM:
                converged = True
                break
            continue
        moved = np.linalg.norm(candidate - f_hat)
        f_hat, best_val = candidate, cand_val
        if moved <= tol:
            converged = True
            break
    if not converged:
        raise NumericError(
            "inner maximization did not converge",
            diagnostics={"iterations": max_iters, "step": step, "value": best_val},
        )
    return base + best_val + spec.delta
