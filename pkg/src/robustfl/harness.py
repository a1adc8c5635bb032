"""Experiment harness: config loading, sweep execution, metric emission.

A single JSON config describes the dataset, model, partition, federation
settings and the (p, epsilon, delta) sweep. Every run is deterministic given
the seed; metric files are written with full-precision floats so repeated
runs are byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .costs import (
    CostModel,
    LabeledDataset,
    LINEAR_REGRESSION,
    LOGISTIC_MULTICLASS,
    UnsupportedModelError,
    local_cost,
    pool,
)
from .data import (
    PartitionPlan,
    load_csv,
    load_idx,
    partition,
    subsample,
    synth_blobs,
    synth_quadratic,
)
from .diagnostics import run_diagnostics
from .federation import FederationConfig, run_federation
from .protection import ProtectionSpec
from .solvers import SolverConfig, solve_centralized

DEFAULT_CHECKPOINTS = (40, 80, 120)

METRICS_HEADER = "round,global_cost,mean_local_cost,step_norm,accuracy"

# Default experiment settings; config files override individual keys.
DEFAULTS: dict[str, Any] = {
    "dataset": {"kind": "blobs", "classes": 10, "features": 64, "samples": 2000, "separation": 3.0},
    "model": {"family": LOGISTIC_MULTICLASS, "num_classes": 10},
    "partition": {"scheme": "label-shard", "num_users": 20, "shards_per_user": 2, "concentration": 0.5},
    "federation": {
        "algorithm": "robust-fed",
        "rounds": 120,
        "local_epochs": 5,
        "step_size": 0.05,
        "solver_tolerance": 1e-6,
        "convergence_tol": 1e-8,
    },
    "sweep": {"p": [1, 2], "epsilon": [0.01, 0.1, 0.2], "delta": "epsilon"},
    "output": {"checkpoints": list(DEFAULT_CHECKPOINTS)},
    "diagnostics": {"enabled": False, "grid_points": 64, "grid_radius": 1.0},
    "subsample": 1.0,
    "eval_split": "train",
    "heldout_fraction": 0.2,
    "include_fedavg": False,
    "jobs": 1,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment description plus seed and output directory."""

    raw: dict
    seed: int
    output_dir: Path

    @property
    def config_hash(self) -> str:
        payload = dict(self.raw)
        payload["seed"] = self.seed
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def section(self, name: str) -> dict:
        return self.raw[name]


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _apply_dotted(config: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def load_config(
    path: str | Path | None,
    seed: int,
    output_dir: str | Path,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Merge defaults, the config file and dotted-path overrides; validate."""
    raw = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path is not None:
        with open(path) as f:
            raw = _deep_merge(raw, json.load(f))
    for dotted, value in (overrides or {}).items():
        _apply_dotted(raw, dotted, value)

    sweep = raw["sweep"]
    if not sweep.get("p") or not sweep.get("epsilon"):
        raise ValueError("sweep lists 'p' and 'epsilon' must be nonempty")
    delta = sweep.get("delta", "epsilon")
    if delta != "epsilon" and (not isinstance(delta, list) or not delta):
        raise ValueError("sweep 'delta' must be 'epsilon' or a nonempty list")
    dataset = raw["dataset"]
    if dataset["kind"] == "idx":
        for key in ("images", "labels"):
            if key not in dataset:
                raise ValueError(f"idx dataset config needs '{key}' path")
            if not Path(dataset[key]).exists():
                raise FileNotFoundError(f"dataset.{key}: {dataset[key]} not found")
    if dataset["kind"] == "csv" and not Path(dataset["path"]).exists():
        raise FileNotFoundError(f"dataset.path: {dataset['path']} not found")
    return ExperimentConfig(raw=raw, seed=seed, output_dir=Path(output_dir))


def norm_label(p: float) -> str:
    if np.isinf(p):
        return "Linf"
    if float(p).is_integer():
        return f"L{int(p)}"
    return f"Lp{p:g}"


@dataclass(frozen=True)
class CellSpec:
    """One sweep cell (or baseline) of the experiment grid."""

    label: str
    algorithm: str  # "centralized", "fedavg" or "robust-fed"/"proxi-fed"
    p: float | None = None
    epsilon: float | None = None
    delta: float | None = None


@dataclass
class RoundRow:
    round: int
    global_cost: float
    mean_local_cost: float
    step_norm: float
    accuracy: float
    wall_time: float = 0.0


@dataclass
class RunRecord:
    label: str
    algorithm: str
    config_hash: str
    p: float | None = None
    epsilon: float | None = None
    delta: float | None = None
    rounds: list[RoundRow] = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_time_total: float = 0.0
    error: str | None = None
    diagnostics: dict | None = None


def evaluate_accuracy(model: CostModel, w: np.ndarray, test: LabeledDataset) -> float:
    """Fraction of samples classified correctly; ties go to the lowest class."""
    if model.family == LINEAR_REGRESSION:
        raise UnsupportedModelError("accuracy is undefined for regression")
    X, y = test.features, test.labels
    if model.family == LOGISTIC_MULTICLASS:
        scores = X @ np.asarray(w, dtype=float).reshape(model.num_features, model.num_classes)
        predictions = np.argmax(scores, axis=1)  # first max = lowest index
        return float(np.mean(predictions == y.astype(int)))
    scores = X @ np.asarray(w, dtype=float)
    predictions = np.where(scores > 0, 1, -1)  # score 0 -> lower class (-1)
    return float(np.mean(predictions == y))


def _accuracy_or_nan(model: CostModel, w: np.ndarray, test: LabeledDataset) -> float:
    if model.family == LINEAR_REGRESSION:
        return float("nan")
    return evaluate_accuracy(model, w, test)


def build_dataset(config: ExperimentConfig) -> LabeledDataset:
    spec = config.section("dataset")
    kind = spec["kind"]
    if kind == "idx":
        data = load_idx(spec["images"], spec["labels"])
    elif kind == "csv":
        data = load_csv(spec["path"])
    elif kind == "blobs":
        data = synth_blobs(
            num_classes=spec["classes"],
            dim=spec["features"],
            samples=spec["samples"],
            separation=spec["separation"],
            seed=config.seed,
        )
    elif kind == "quadratic":
        users, _ = synth_quadratic(
            num_users=spec["users"],
            dim=spec["dim"],
            heterogeneity=spec["heterogeneity"],
            seed=config.seed,
        )
        data = pool(users)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    fraction = config.raw.get("subsample", 1.0)
    return subsample(data, fraction, seed=config.seed + 1)


def build_model(config: ExperimentConfig, data: LabeledDataset) -> CostModel:
    spec = config.section("model")
    family = spec["family"]
    num_classes = spec.get("num_classes", 1) if family == LOGISTIC_MULTICLASS else 1
    return CostModel(family=family, num_features=data.num_features, num_classes=num_classes)


def build_cells(config: ExperimentConfig) -> list[CellSpec]:
    sweep = config.section("sweep")
    algorithm = config.section("federation")["algorithm"]
    cells = [CellSpec(label="centralized", algorithm="centralized")]
    if config.raw.get("include_fedavg", False):
        cells.append(CellSpec(label="fedavg", algorithm="fedavg"))
    deltas = sweep.get("delta", "epsilon")
    tied = deltas == "epsilon"
    for p in sweep["p"]:
        for eps in sweep["epsilon"]:
            for delta in ([eps] if tied else deltas):
                label = f"{norm_label(p)}_eps{eps:g}"
                if not tied:
                    label += f"_delta{delta:g}"
                cells.append(
                    CellSpec(label=label, algorithm=algorithm, p=float(p), epsilon=float(eps), delta=float(delta))
                )
    return cells


def _federation_config(config: ExperimentConfig, cell: CellSpec, num_users: int) -> FederationConfig:
    fed = config.section("federation")
    solver = SolverConfig(
        step_size=fed["step_size"],
        max_iters=fed["rounds"] * fed["local_epochs"],
        tolerance=fed["solver_tolerance"],
        seed=config.seed,
    )
    if cell.algorithm == "fedavg":
        specs = tuple(ProtectionSpec(p=2, epsilon=0.0, delta=0.0) for _ in range(num_users))
        algorithm = "fedavg"
    else:
        specs = tuple(
            ProtectionSpec(p=cell.p, epsilon=cell.epsilon, delta=cell.delta)
            for _ in range(num_users)
        )
        algorithm = cell.algorithm
    return FederationConfig(
        num_users=num_users,
        rounds=fed["rounds"],
        local_config=solver,
        protection=specs,
        algorithm=algorithm,
        architecture=fed.get("architecture", "fusion"),
        local_epochs=fed["local_epochs"],
        convergence_tol=fed["convergence_tol"],
    )


# Worker context for parallel cell execution (populated before forking).
_CELL_CONTEXT: dict[str, Any] = {}


def _run_cell(
    cell: CellSpec,
    config: ExperimentConfig,
    model: CostModel,
    users: list[LabeledDataset],
    eval_data: LabeledDataset,
) -> RunRecord:
    record = RunRecord(
        label=cell.label,
        algorithm=cell.algorithm,
        config_hash=config.config_hash,
        p=cell.p,
        epsilon=cell.epsilon,
        delta=cell.delta,
    )
    fed = config.section("federation")
    started = time.perf_counter()
    try:
        if cell.algorithm == "centralized":
            pooled = pool(users)
            solver = SolverConfig(
                step_size=fed["step_size"],
                max_iters=fed["rounds"] * fed["local_epochs"],
                tolerance=fed["convergence_tol"],
                seed=config.seed,
            )
            trace = solve_centralized(model, pooled, solver)
            previous = None
            for i, (w, cost) in enumerate(zip(trace.iterates, trace.costs)):
                step_norm = float("nan") if previous is None else float(np.linalg.norm(w - previous))
                record.rounds.append(
                    RoundRow(
                        round=i,
                        global_cost=cost,
                        mean_local_cost=float(np.mean([local_cost(model, w, d) for d in users])),
                        step_norm=step_norm,
                        accuracy=_accuracy_or_nan(model, w, eval_data),
                    )
                )
                previous = w
            final_w = trace.final
        else:
            fed_config = _federation_config(config, cell, num_users=len(users))
            state = run_federation(model, users, fed_config)
            for metrics in state.history:
                record.rounds.append(
                    RoundRow(
                        round=metrics.round,
                        global_cost=metrics.global_cost,
                        mean_local_cost=float(np.mean(metrics.local_costs)),
                        step_norm=metrics.step_norm,
                        accuracy=_accuracy_or_nan(model, metrics.aggregate, eval_data),
                        wall_time=metrics.wall_time,
                    )
                )
            final_w = state.aggregate
        record.final_accuracy = record.rounds[-1].accuracy
        diag_cfg = config.section("diagnostics")
        if diag_cfg.get("enabled", False) and cell.algorithm not in ("centralized",) and model.smooth:
            record.diagnostics = _cell_diagnostics(config, model, users, final_w)
    except Exception as err:  # isolate failures to their grid cell
        record.error = f"{type(err).__name__}: {err}"
    record.wall_time_total = time.perf_counter() - started
    return record


def _cell_diagnostics(
    config: ExperimentConfig,
    model: CostModel,
    users: list[LabeledDataset],
    w_federated: np.ndarray,
) -> dict:
    from .diagnostics import weight_grid

    fed = config.section("federation")
    diag = config.section("diagnostics")
    solver = SolverConfig(
        step_size=fed["step_size"],
        max_iters=fed["rounds"] * fed["local_epochs"] * 10,
        tolerance=fed["convergence_tol"] / 100.0,  # keep solver noise out of delta
        seed=config.seed,
    )
    trace = solve_centralized(model, pool(users), solver)
    sweep = config.section("sweep")
    eps0 = float(sweep["epsilon"][0])
    delta0 = eps0 if sweep.get("delta", "epsilon") == "epsilon" else float(sweep["delta"][0])
    specs = [ProtectionSpec(p=float(sweep["p"][0]), epsilon=eps0, delta=delta0) for _ in users]
    grid = weight_grid(
        model.param_dim,
        num=diag.get("grid_points", 64),
        radius=diag.get("grid_radius", 1.0),
        seed=config.seed,
    )
    report = run_diagnostics(
        model, users, specs, trace.final, w_federated, sample_grid=grid
    )
    return report.to_dict()


def _run_cell_by_index(index: int) -> RunRecord:
    ctx = _CELL_CONTEXT
    return _run_cell(ctx["cells"][index], ctx["config"], ctx["model"], ctx["users"], ctx["eval"])


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """Execute the centralized baseline plus the full sweep grid.

    Cell failures are captured in their records; the rest of the grid still
    runs. Deterministic given the seed, including under parallel execution.
    """
    _check_writable(config.output_dir)

    data = build_dataset(config)
    if config.raw.get("eval_split", "train") == "heldout":
        rng = np.random.default_rng(config.seed + 2)
        order = rng.permutation(data.num_samples)
        cut = int(round(data.num_samples * (1.0 - config.raw["heldout_fraction"])))
        train = LabeledDataset(data.features[order[:cut]], data.labels[order[:cut]])
        eval_data = LabeledDataset(data.features[order[cut:]], data.labels[order[cut:]])
    else:
        train = eval_data = data

    plan_cfg = config.section("partition")
    plan = PartitionPlan(
        scheme=plan_cfg["scheme"],
        num_users=plan_cfg["num_users"],
        shards_per_user=plan_cfg.get("shards_per_user", 2),
        concentration=plan_cfg.get("concentration", 0.5),
        seed=config.seed,
    )
    users = partition(train, plan)
    model = build_model(config, train)
    cells = build_cells(config)

    jobs = int(config.raw.get("jobs", 1))
    if jobs > 1:
        _CELL_CONTEXT.update(
            {"cells": cells, "config": config, "model": model, "users": users, "eval": eval_data}
        )
        try:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool_exec:
                records = list(pool_exec.map(_run_cell_by_index, range(len(cells))))
        finally:
            _CELL_CONTEXT.clear()
    else:
        records = [_run_cell(cell, config, model, users, eval_data) for cell in cells]

    emit_outputs(records, config.output_dir, config=config)
    return records


def _check_writable(out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write-probe"
    try:
        probe.write_text("")
    except OSError as err:
        raise OSError(f"output directory {out_dir} is not writable: {err}") from err
    finally:
        if probe.exists():
            probe.unlink()


def _fmt(value: float) -> str:
    return repr(float(value))


def emit_outputs(
    records: list[RunRecord],
    output_dir: str | Path,
    config: ExperimentConfig | None = None,
    checkpoints: Sequence[int] | None = None,
) -> list[Path]:
    """Write per-run metric CSVs, the checkpoint summary grid and a manifest.

    Returns the list of written paths.
    """
    out = Path(output_dir)
    _check_writable(out)
    if checkpoints is None:
        if config is not None:
            checkpoints = config.section("output").get("checkpoints", DEFAULT_CHECKPOINTS)
        else:
            checkpoints = DEFAULT_CHECKPOINTS
    written: list[Path] = []

    for record in records:
        path = out / f"metrics_{record.label}.csv"
        lines = [METRICS_HEADER]
        for row in record.rounds:
            lines.append(
                ",".join(
                    [
                        str(row.round),
                        _fmt(row.global_cost),
                        _fmt(row.mean_local_cost),
                        _fmt(row.step_norm),
                        _fmt(row.accuracy),
                    ]
                )
            )
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    grid_records = [r for r in records if r.p is not None]
    if grid_records:
        header = ["round"] + [r.label for r in grid_records]
        lines = [",".join(header)]
        for checkpoint in checkpoints:
            cells = [str(checkpoint)]
            for record in grid_records:
                if record.error or not record.rounds:
                    cells.append("")
                    continue
                idx = min(checkpoint, record.rounds[-1].round)
                cells.append(_fmt(record.rounds[idx].accuracy))
            lines.append(",".join(cells))
        summary = out / "summary.csv"
        summary.write_text("\n".join(lines) + "\n")
        written.append(summary)

    manifest = {
        "config_hash": records[0].config_hash if records else None,
        "config": config.raw if config is not None else None,
        "seed": config.seed if config is not None else None,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "robustfl": __version__,
        },
        "records": [
            {
                "label": r.label,
                "algorithm": r.algorithm,
                "p": r.p,
                "epsilon": r.epsilon,
                "delta": r.delta,
                "rounds_completed": r.rounds[-1].round if r.rounds else 0,
                "final_accuracy": None if np.isnan(r.final_accuracy) else r.final_accuracy,
                "wall_time_sec": round(r.wall_time_total, 3),
                "error": r.error,
                "diagnostics": r.diagnostics,
            }
            for r in records
        ],
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(manifest_path)
    return written
