"""Multi-user training rounds: plain FedAvg, protection-regularized FedAvg,
and the proximal-point loop.

Both architectures compute the same aggregate each round; they differ only in
the message pattern that is logged (fusion: user -> server -> user,
decentralized: all-to-all).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .costs import CostModel, LabeledDataset, global_cost, local_cost
from .protection import NumericError, ProtectionSpec, protection_gradient
from .solvers import SolverConfig, gd_step, initial_weights, proximal_response

ALGORITHMS = ("fedavg", "robust-fed", "proxi-fed")
ARCHITECTURES = ("fusion", "decentralized")

SERVER = -1  # sender/receiver id of the fusion server in message records


@dataclass(frozen=True)
class FederationConfig:
    """Round structure, per-user protection and local-solver settings."""

    num_users: int
    rounds: int
    local_config: SolverConfig
    protection: tuple[ProtectionSpec, ...]
    algorithm: str = "fedavg"
    architecture: str = "fusion"
    local_epochs: int = 5
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be > 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        protection = tuple(self.protection)
        if len(protection) != self.num_users:
            raise ValueError(
                f"{len(protection)} protection specs for {self.num_users} users"
            )
        object.__setattr__(self, "protection", protection)


@dataclass(frozen=True)
class RoundMetrics:
    """Snapshot recorded after each aggregation (round 0 = initial state).

    The convergence test uses the aggregate step norm; per-user step norms
    are logged alongside it.
    """

    round: int
    aggregate: np.ndarray
    global_cost: float
    local_costs: tuple[float, ...]
    step_norm: float
    user_step_norms: tuple[float, ...] = ()
    wall_time: float = 0.0


@dataclass
class FederationState:
    round: int
    user_weights: list[np.ndarray]
    aggregate: np.ndarray
    history: list[RoundMetrics]
    messages: list[tuple[int, int, int]] = field(default_factory=list)

    def converged(self, tol: float) -> bool:
        return self.round > 0 and self.history[-1].step_norm <= tol


def aggregate_weights(user_weights: Sequence[np.ndarray]) -> np.ndarray:
    """Componentwise mean, summed in user-index order for determinism."""
    if len(user_weights) == 0:
        raise ValueError("cannot aggregate an empty weight list")
    first = np.asarray(user_weights[0], dtype=float)
    total = np.zeros_like(first)
    for i, w in enumerate(user_weights):
        w = np.asarray(w, dtype=float)
        if w.shape != first.shape:
            raise ValueError(
                f"user {i} weight shape {w.shape} differs from {first.shape}"
            )
        total += w
    return total / len(user_weights)


def _local_update(
    n: int,
    model: CostModel,
    data: LabeledDataset,
    state: FederationState,
    config: FederationConfig,
) -> np.ndarray:
    """One user's weights after this round's local work."""
    spec = config.protection[n]
    solver = config.local_config
    anchor = state.aggregate

    if config.algorithm == "proxi-fed":
        try:
            return proximal_response(
                model, state.user_weights[n], anchor, data, spec, solver
            )
        except NumericError as err:
            raise NumericError(
                f"user {n}, round {state.round + 1}: {err}", err.diagnostics
            ) from err

    robust = config.algorithm == "robust-fed" and spec.epsilon > 0
    # Subgradient decay for non-smooth protection (dual order 1 or inf).
    decay = robust and (spec.dual_order == 1 or math.isinf(spec.dual_order))
    w = anchor.copy()
    for epoch in range(1, config.local_epochs + 1):
        global_t = state.round * config.local_epochs + epoch
        step = solver.step_size / math.sqrt(global_t) if decay else solver.step_at(global_t)
        extra = -protection_gradient(spec, anchor - w) if robust else None
        try:
            w = gd_step(model, w, data, step, extra_gradient=extra)
        except NumericError as err:
            raise NumericError(
                f"user {n}, round {state.round + 1}: {err}", err.diagnostics
            ) from err
    return w


def _log_messages(state: FederationState, config: FederationConfig, dim: int) -> None:
    if config.architecture == "fusion":
        for n in range(config.num_users):
            state.messages.append((n, SERVER, dim))
        for n in range(config.num_users):
            state.messages.append((SERVER, n, dim))
    else:
        # All-to-all exchange, self-delivery included: N^2 records per round.
        for n in range(config.num_users):
            for m in range(config.num_users):
                state.messages.append((n, m, dim))


def run_round(
    state: FederationState,
    model: CostModel,
    datasets: Sequence[LabeledDataset],
    config: FederationConfig,
) -> FederationState:
    """Advance the federation by one round and return the new state."""
    t0 = time.perf_counter()
    new_weights = [
        _local_update(n, model, datasets[n], state, config)
        for n in range(config.num_users)
    ]
    new_aggregate = aggregate_weights(new_weights)
    step_norm = float(np.linalg.norm(new_aggregate - state.aggregate))
    user_step_norms = tuple(
        float(np.linalg.norm(new - old))
        for new, old in zip(new_weights, state.user_weights)
    )

    new_state = FederationState(
        round=state.round + 1,
        user_weights=new_weights,
        aggregate=new_aggregate,
        history=list(state.history),
        messages=list(state.messages),
    )
    _log_messages(new_state, config, dim=new_aggregate.size)
    new_state.history.append(
        RoundMetrics(
            round=new_state.round,
            aggregate=new_aggregate.copy(),
            global_cost=global_cost(model, new_aggregate, list(datasets)),
            local_costs=tuple(
                local_cost(model, new_weights[n], datasets[n])
                for n in range(config.num_users)
            ),
            step_norm=step_norm,
            user_step_norms=user_step_norms,
            wall_time=time.perf_counter() - t0,
        )
    )
    return new_state


def initial_state(
    model: CostModel,
    datasets: Sequence[LabeledDataset],
    config: FederationConfig,
    init: np.ndarray | Sequence[np.ndarray] | None = None,
) -> FederationState:
    """Round-0 state: every user at the broadcast starting point (or at the
    supplied per-user weights)."""
    if len(datasets) != config.num_users:
        raise ValueError(f"{len(datasets)} datasets for {config.num_users} users")
    if init is None:
        w0 = initial_weights(model.param_dim, config.local_config.seed)
        user_weights = [w0.copy() for _ in range(config.num_users)]
    elif isinstance(init, np.ndarray) and init.ndim == 1:
        user_weights = [np.asarray(init, dtype=float).copy() for _ in range(config.num_users)]
    else:
        user_weights = [np.asarray(w, dtype=float).copy() for w in init]
        if len(user_weights) != config.num_users:
            raise ValueError("one initial weight vector per user required")
    aggregate = aggregate_weights(user_weights)
    state = FederationState(
        round=0, user_weights=user_weights, aggregate=aggregate, history=[]
    )
    state.history.append(
        RoundMetrics(
            round=0,
            aggregate=aggregate.copy(),
            global_cost=global_cost(model, aggregate, list(datasets)),
            local_costs=tuple(
                local_cost(model, user_weights[n], datasets[n])
                for n in range(config.num_users)
            ),
            step_norm=float("nan"),
            user_step_norms=tuple(float("nan") for _ in range(config.num_users)),
        )
    )
    return state


def run_federation(
    model: CostModel,
    datasets: Sequence[LabeledDataset],
    config: FederationConfig,
    init: np.ndarray | Sequence[np.ndarray] | None = None,
    round_hook=None,
) -> FederationState:
    """Run rounds until the aggregate stops moving (step norm <= tolerance)
    or the round budget is exhausted.

    ``round_hook(state)`` is called after every round; it must not mutate the
    state.
    """
    state = initial_state(model, datasets, config, init=init)
    if round_hook is not None:
        round_hook(state)
    for _ in range(config.rounds):
        state = run_round(state, model, datasets, config)
        if round_hook is not None:
            round_hook(state)
        if state.history[-1].step_norm <= config.convergence_tol:
            break
    return state
