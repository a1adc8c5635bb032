"""Command-line entry point: run sweeps, diagnose instances, inspect IDX files."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

OUTPUT_ROOT_ENV = "ROBUSTFL_OUT"


def _parse_set(values: list[str]) -> dict:
    overrides = {}
    for item in values:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _resolve_out(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise SystemExit(f"--out is required (or set {OUTPUT_ROOT_ENV})")
    return Path(root)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", required=True, type=int, help="master seed")
    parser.add_argument(
        "--out",
        default=None,
        help=f"output directory (default: ${OUTPUT_ROOT_ENV})",
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key by dotted path, e.g. federation.rounds=40",
    )


def cmd_run(args) -> int:
    from .harness import load_config, run_experiment

    overrides = _parse_set(args.set)
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.subsample is not None:
        overrides["subsample"] = args.subsample
    if args.heldout:
        overrides["eval_split"] = "heldout"
    config = load_config(args.config, seed=args.seed, output_dir=_resolve_out(args), overrides=overrides)
    records = run_experiment(config)
    failed = [r for r in records if r.error]
    print(f"wrote {len(records)} records to {config.output_dir} (hash {config.config_hash})")
    for record in records:
        status = f"ERROR: {record.error}" if record.error else (
            f"rounds={record.rounds[-1].round}"
            + ("" if np.isnan(record.final_accuracy) else f" acc={record.final_accuracy:.4f}")
        )
        print(f"  {record.label:<24} {status}")
    return 1 if failed else 0


def cmd_diagnose(args) -> int:
    from .costs import pool
    from .diagnostics import run_diagnostics, weight_grid
    from .harness import build_cells, build_dataset, build_model, load_config, _federation_config
    from .data import PartitionPlan, partition
    from .federation import run_federation
    from .solvers import SolverConfig, solve_centralized

    config = load_config(args.config, seed=args.seed, output_dir=_resolve_out(args), overrides=_parse_set(args.set))
    data = build_dataset(config)
    plan_cfg = config.section("partition")
    plan = PartitionPlan(
        scheme=plan_cfg["scheme"],
        num_users=plan_cfg["num_users"],
        shards_per_user=plan_cfg.get("shards_per_user", 2),
        concentration=plan_cfg.get("concentration", 0.5),
        seed=config.seed,
    )
    users = partition(data, plan)
    model = build_model(config, data)

    cell = next(c for c in build_cells(config) if c.p is not None)
    fed = config.section("federation")
    state = run_federation(model, users, _federation_config(config, cell, len(users)))
    solver = SolverConfig(
        step_size=fed["step_size"],
        max_iters=fed["rounds"] * fed["local_epochs"] * 10,
        tolerance=fed["convergence_tol"] / 100.0,
        seed=config.seed,
    )
    trace = solve_centralized(model, pool(users), solver)

    diag = config.section("diagnostics")
    from .protection import ProtectionSpec

    specs = [ProtectionSpec(p=cell.p, epsilon=cell.epsilon, delta=cell.delta) for _ in users]
    grid = weight_grid(
        model.param_dim,
        num=diag.get("grid_points", 64),
        radius=diag.get("grid_radius", 1.0),
        seed=config.seed,
    )
    report = run_diagnostics(model, users, specs, trace.final, state.aggregate, sample_grid=grid)

    out = _resolve_out(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "diagnostics.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")

    print(f"instance: {cell.label} ({len(users)} users, dim {model.param_dim})")
    print(f"P-matrix: {report.p_matrix}")
    method = "exact" if report.c_sm_exact else "sampled"
    print(f"c_sm: {report.c_sm:.6g} ({method})")
    if report.gap is not None:
        print(f"delta: {report.gap.delta:.6g}  bound: {report.gap.bound:.6g}  holds: {report.gap.bound_holds}")
    else:
        print("delta bound: undefined (mapping not strongly monotone on the sampled set)")
    print(f"perturbation sup over grid: {report.perturbation_sup:.6g}")
    print(f"wrote {path}")
    return 0


def cmd_inspect_idx(args) -> int:
    from .data import inspect_idx

    for path in args.paths:
        info = inspect_idx(path)
        dims = " x ".join(str(d) for d in info["dims"])
        print(f"{info['path']}: magic={info['magic']:#010x} dtype=0x{info['dtype_code']:02x} dims={dims}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="robustfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="execute the sweep grid plus centralized baseline")
    _add_common(run_parser)
    run_parser.add_argument("--jobs", type=int, default=None, help="parallel grid cells")
    run_parser.add_argument("--subsample", type=float, default=None, help="training-set fraction")
    run_parser.add_argument("--heldout", action="store_true", help="evaluate accuracy on a held-out split")
    run_parser.set_defaults(func=cmd_run)

    diag_parser = sub.add_parser("diagnose", help="P-matrix / c_sm / gap analysis of one instance")
    _add_common(diag_parser)
    diag_parser.set_defaults(func=cmd_diagnose)

    idx_parser = sub.add_parser("inspect-idx", help="print IDX file headers")
    idx_parser.add_argument("paths", nargs="+")
    idx_parser.set_defaults(func=cmd_inspect_idx)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
