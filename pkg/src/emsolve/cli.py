"""Command-line front end: statistics estimation, sampling, and benchmarks.

Subcommands:

* ``ems``: estimate a statistics table for a model/schedule pair and write it
  to JSON.
* ``solve``: sample one trajectory with the multistep solver.
* ``bench-convergence``: error versus step count against the adaptive
  reference integrator, with fitted log-log slopes appended.
* ``bench-compare``: estimated statistics versus the degenerate
  noise-/data-prediction baselines and DDIM on shared initial noise.

All commands are deterministic functions of their flags and seeds; outputs
are byte-identical across runs (pass ``--timing`` to record wall-clock times,
which breaks that property).  Exit codes: 0 success, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from .ems import (
    DATA_PRED,
    NOISE_PRED,
    EmsConfig,
    degenerate_table,
    estimate_table,
    load_table,
    save_table,
)
from .integrals import build_integral_table
from .models import EvalCounter, ModelSpec, model_from_dict, reference_solve
from .schedule import Schedule, make_time_grid
from .solver import SolverConfig, ddim_sample, multistep_sample

CSV_HEADER = "solver,order,corrector,nfe,h_max,l2_error,linf_error,seconds,seed"

REFERENCE_TOL = 1e-10
FLOOR_ERROR = 1e-8
SUMMARY_SEED = -1


@dataclass(frozen=True)
class RunRow:
    """One benchmark measurement (or summary line) in the report CSV."""

    solver: str
    order: int
    corrector: str
    nfe: int
    h_max: float
    l2_error: float
    linf_error: float
    seconds: float
    seed: int


@dataclass
class RunReport:
    rows: list

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r.solver, r.order, r.nfe, r.seed))


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def format_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join(_fmt(getattr(r, f.name)) for f in fields(RunRow)))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list:
    lines = [ln for ln in text.split("\n") if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected CSV header: {lines[0] if lines else '<empty>'}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 9:
            raise ValueError(f"bad CSV row: {ln}")
        rows.append(
            RunRow(
                solver=parts[0],
                order=int(parts[1]),
                corrector=parts[2],
                nfe=int(parts[3]),
                h_max=float(parts[4]),
                l2_error=float(parts[5]),
                linf_error=float(parts[6]),
                seconds=float(parts[7]),
                seed=int(parts[8]),
            )
        )
    return rows


def measure_order(rows) -> float:
    """Ordinary least-squares slope of log(l2_error) against log(h_max)."""
    hs = np.array([r.h_max for r in rows], dtype=float)
    errs = np.array([r.l2_error for r in rows], dtype=float)
    if len(set(hs.tolist())) < 3:
        raise ValueError("need at least 3 rows with distinct h_max to fit a slope")
    if np.any(errs <= 0) or np.any(hs <= 0):
        raise ValueError("slope is undefined for non-positive errors or steps")
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


# -- shared helpers -------------------------------------------------------------


def _load_model(path) -> ModelSpec:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def _load_schedule(path) -> Schedule:
    with open(path) as fh:
        return Schedule.from_dict(json.load(fh))


def _initial_noise(sched, lam_start: float, dim: int, seed: int):
    rng = np.random.Generator(np.random.Philox(seed))
    return sched.sigma_lambda(lam_start) * rng.standard_normal(dim)


def _table_time_range(table):
    sched = table.schedule
    lam = table.lambda_grid
    return float(sched.t_of_lambda(lam[-1])), float(sched.t_of_lambda(lam[0]))


def _error_row(x, ref):
    diff = np.asarray(x) - np.asarray(ref)
    return float(np.linalg.norm(diff)), float(np.max(np.abs(diff)))


# -- subcommands ----------------------------------------------------------------


def cmd_ems(args) -> int:
    model = _load_model(args.model)
    sched = _load_schedule(args.schedule)
    cfg = EmsConfig(
        num_timesteps=args.num_timesteps,
        num_datapoints=args.num_datapoints,
        lam_range=(args.lam_min, args.lam_max),
        probes_per_point=args.probes,
        seed=args.seed,
    )
    table = estimate_table(model, sched, cfg)
    save_table(table, args.out)
    print(f"wrote {args.out}: {args.num_timesteps} intervals, K={args.num_datapoints}")
    print(f"l mean = {table.l.mean():.6f}")
    print(f"s mean = {table.s.mean():.6f}")
    print(f"b mean = {table.b.mean():.6f}")
    return 0


def cmd_solve(args) -> int:
    table = load_table(args.ems)
    sched = table.schedule
    model = _load_model(args.model)
    t_default_end, t_default_start = _table_time_range(table)
    t_start = args.t_start if args.t_start is not None else t_default_start
    t_end = args.t_end if args.t_end is not None else t_default_end
    grid = make_time_grid(sched, args.steps, args.grid, t_start, t_end)
    cfg = SolverConfig(
        order=args.order,
        grid=grid,
        corrector=args.corrector,
        pseudo_predictor=args.pseudo_predictor,
        pseudo_corrector=args.pseudo_corrector,
    )
    tab = build_integral_table(table)
    lam0 = table.lambda_grid[table.index_of(grid.lambdas[0])]
    x_init = _initial_noise(sched, lam0, table.dim, args.noise_seed)
    x_final, trace = multistep_sample(model, sched, tab, cfg, x_init)
    payload = {
        "grid": [row["t"] for row in trace],
        "x_final": np.asarray(x_final).tolist(),
    }
    if args.trace:
        payload["trace"] = trace
    with open(args.out, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    print(f"wrote {args.out}: {args.steps} steps, order {args.order}, corrector {args.corrector}")
    return 0


def _run_solver_case(model, sched, tab, order, corrector, nfe, grid_kind, t_start, t_end, x_init):
    grid = make_time_grid(sched, nfe, grid_kind, t_start, t_end)
    cfg = SolverConfig(order=order, grid=grid, corrector=corrector)
    counted = EvalCounter(model)
    start = time.perf_counter()
    x_final, _ = multistep_sample(counted, sched, tab, cfg, x_init)
    elapsed = time.perf_counter() - start
    if counted.calls != nfe:
        raise RuntimeError(f"model-call accounting broke: {counted.calls} calls for {nfe} steps")
    h_max = float(np.max(np.diff(tab.ems.lambda_grid[[tab.ems.index_of(l) for l in grid.lambdas]])))
    return x_final, h_max, elapsed


def cmd_bench_convergence(args) -> int:
    model = _load_model(args.model)
    table = load_table(args.ems)
    sched = table.schedule
    tab = build_integral_table(table)
    t_end, t_start = _table_time_range(table)
    lam0, lam1 = float(table.lambda_grid[0]), float(table.lambda_grid[-1])

    rows = []
    for seed in args.seeds:
        x_init = _initial_noise(sched, lam0, table.dim, seed)
        ref = reference_solve(model, sched, x_init, lam0, lam1, tol=REFERENCE_TOL)
        for order in args.orders:
            for nfe in args.nfe:
                x_final, h_max, elapsed = _run_solver_case(
                    model, sched, tab, order, args.corrector, nfe, args.grid, t_start, t_end, x_init
                )
                l2, linf = _error_row(x_final, ref)
                rows.append(
                    RunRow(
                        solver="v3",
                        order=order,
                        corrector=args.corrector,
                        nfe=nfe,
                        h_max=h_max,
                        l2_error=l2,
                        linf_error=linf,
                        seconds=elapsed if args.timing else 0.0,
                        seed=seed,
                    )
                )

    report = RunReport(rows)
    out_rows = report.sorted_rows()
    for order in sorted(args.orders):
        subset = [r for r in rows if r.order == order]
        if all(r.l2_error <= FLOOR_ERROR for r in subset):
            out_rows.append(
                RunRow("slope", order, "floor", 0, 0.0, 0.0, 0.0, 0.0, SUMMARY_SEED)
            )
        elif len({r.h_max for r in subset}) < 3:
            out_rows.append(RunRow("slope", order, "na", 0, 0.0, 0.0, 0.0, 0.0, SUMMARY_SEED))
        else:
            slope = measure_order(subset)
            out_rows.append(
                RunRow("slope", order, "fit", 0, 0.0, slope, slope, 0.0, SUMMARY_SEED)
            )
    with open(args.out, "w") as fh:
        fh.write(format_csv(out_rows))
    print(f"wrote {args.out}: {len(out_rows)} rows")
    return 0


def cmd_bench_compare(args) -> int:
    model = _load_model(args.model)
    table = load_table(args.ems)
    sched = table.schedule
    tab_v3 = build_integral_table(table)
    t_end, t_start = _table_time_range(table)
    lam0, lam1 = float(table.lambda_grid[0]), float(table.lambda_grid[-1])
    lam_range = (lam0, lam1)
    n_intervals = len(table.lambda_grid) - 1

    baseline_tabs = {}
    for kind in args.baselines:
        if kind in (NOISE_PRED, DATA_PRED):
            baseline_tabs[kind] = build_integral_table(
                degenerate_table(kind, sched, n_intervals, lam_range, table.dim)
            )

    rows = []
    for seed in args.seeds:
        x_init = _initial_noise(sched, lam0, table.dim, seed)
        ref = reference_solve(model, sched, x_init, lam0, lam1, tol=REFERENCE_TOL)
        for nfe in args.nfe:
            cases = [("v3", tab_v3, args.order, args.corrector)]
            for kind in args.baselines:
                if kind == "ddim":
                    continue
                cases.append((kind, baseline_tabs[kind], args.order, args.corrector))
            for name, tab, order, corrector in cases:
                x_final, h_max, elapsed = _run_solver_case(
                    model, sched, tab, order, corrector, nfe, args.grid, t_start, t_end, x_init
                )
                l2, linf = _error_row(x_final, ref)
                rows.append(
                    RunRow(
                        solver=name,
                        order=order,
                        corrector=corrector,
                        nfe=nfe,
                        h_max=h_max,
                        l2_error=l2,
                        linf_error=linf,
                        seconds=elapsed if args.timing else 0.0,
                        seed=seed,
                    )
                )
            if "ddim" in args.baselines:
                grid = make_time_grid(sched, nfe, args.grid, t_start, t_end)
                idx = [table.index_of(l) for l in grid.lambdas]
                snapped_lams = table.lambda_grid[idx]
                ts = np.asarray(sched.t_of_lambda(snapped_lams), dtype=float)
                counted = EvalCounter(model)
                start = time.perf_counter()
                x_final = ddim_sample(counted, sched, ts, x_init)
                elapsed = time.perf_counter() - start
                if counted.calls != nfe:
                    raise RuntimeError(
                        f"model-call accounting broke: {counted.calls} calls for {nfe} steps"
                    )
                l2, linf = _error_row(x_final, ref)
                rows.append(
                    RunRow(
                        solver="ddim",
                        order=1,
                        corrector="none",
                        nfe=nfe,
                        h_max=float(np.max(np.diff(snapped_lams))),
                        l2_error=l2,
                        linf_error=linf,
                        seconds=elapsed if args.timing else 0.0,
                        seed=seed,
                    )
                )

    report = RunReport(rows)
    out_rows = report.sorted_rows()
    # per-(solver, nfe) mean errors as summary rows
    for name in sorted({r.solver for r in rows}):
        for nfe in sorted(args.nfe):
            subset = [r for r in rows if r.solver == name and r.nfe == nfe]
            out_rows.append(
                RunRow(
                    solver=name,
                    order=subset[0].order,
                    corrector="mean",
                    nfe=nfe,
                    h_max=subset[0].h_max,
                    l2_error=float(np.mean([r.l2_error for r in subset])),
                    linf_error=float(np.mean([r.linf_error for r in subset])),
                    seconds=0.0,
                    seed=SUMMARY_SEED,
                )
            )
    with open(args.out, "w") as fh:
        fh.write(format_csv(out_rows))
    print(f"wrote {args.out}: {len(out_rows)} rows")
    return 0


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emsolve",
        description="Exponential-integrator diffusion ODE solvers with empirical model statistics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ems = sub.add_parser("ems", help="estimate a statistics table")
    p_ems.add_argument("--model", required=True, help="model JSON file")
    p_ems.add_argument("--schedule", required=True, help="schedule JSON file")
    p_ems.add_argument("--num-timesteps", type=int, default=120, metavar="N")
    p_ems.add_argument("--num-datapoints", type=int, default=1024, metavar="K")
    p_ems.add_argument("--probes", type=int, default=1)
    p_ems.add_argument("--seed", type=int, default=0)
    p_ems.add_argument("--lam-min", type=float, required=True)
    p_ems.add_argument("--lam-max", type=float, required=True)
    p_ems.add_argument("--out", required=True)
    p_ems.set_defaults(func=cmd_ems)

    p_solve = sub.add_parser("solve", help="sample one trajectory")
    p_solve.add_argument("--ems", required=True, help="statistics table JSON file")
    p_solve.add_argument("--model", required=True)
    p_solve.add_argument("--order", type=int, default=3)
    p_solve.add_argument("--corrector", choices=["none", "full", "half"], default="none")
    p_solve.add_argument("--pseudo-predictor", action="store_true")
    p_solve.add_argument("--pseudo-corrector", action="store_true")
    p_solve.add_argument("--steps", type=int, required=True, metavar="M")
    p_solve.add_argument("--grid", choices=["uniform-lambda", "uniform-t"], default="uniform-lambda")
    p_solve.add_argument("--t-start", type=float, default=None)
    p_solve.add_argument("--t-end", type=float, default=None)
    p_solve.add_argument("--noise-seed", type=int, default=0)
    p_solve.add_argument("--out", required=True)
    p_solve.add_argument("--trace", action="store_true")
    p_solve.set_defaults(func=cmd_solve)

    p_conv = sub.add_parser("bench-convergence", help="error-vs-steps study")
    p_conv.add_argument("--model", required=True)
    p_conv.add_argument("--ems", required=True)
    p_conv.add_argument("--orders", type=int, nargs="+", default=[1, 2, 3])
    p_conv.add_argument("--nfe", type=int, nargs="+", default=[10, 20, 40, 80])
    p_conv.add_argument("--seeds", type=int, nargs="+", default=[0])
    p_conv.add_argument("--grid", choices=["uniform-lambda", "uniform-t"], default="uniform-lambda")
    p_conv.add_argument("--corrector", choices=["none", "full", "half"], default="none")
    p_conv.add_argument("--timing", action="store_true")
    p_conv.add_argument("--out", required=True)
    p_conv.set_defaults(func=cmd_bench_convergence)

    p_cmp = sub.add_parser("bench-compare", help="estimated statistics vs baselines")
    p_cmp.add_argument("--model", required=True)
    p_cmp.add_argument("--ems", required=True)
    p_cmp.add_argument(
        "--baselines",
        nargs="+",
        choices=[NOISE_PRED, DATA_PRED, "ddim"],
        default=[NOISE_PRED, DATA_PRED, "ddim"],
    )
    p_cmp.add_argument("--order", type=int, default=3)
    p_cmp.add_argument("--corrector", choices=["none", "full", "half"], default="none")
    p_cmp.add_argument("--nfe", type=int, nargs="+", default=[5, 8, 10])
    p_cmp.add_argument("--seeds", type=int, nargs="+", default=[0])
    p_cmp.add_argument("--grid", choices=["uniform-lambda", "uniform-t"], default="uniform-lambda")
    p_cmp.add_argument("--timing", action="store_true")
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_bench_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
