"""Command-line entry points for twin-experiment runs and exports.

Subcommands:

* ``climatology``: compute (and cache) the long-run mean/covariance.
* ``grid-search``: fixed-hyper-parameter RMSE over a (delta, lambda) grid.
* ``chop``: repetitions of the per-cycle tuned filter.
* ``single-run``: one repetition, with optional per-cycle search traces.
* ``export``: regenerate the CSV set from a saved records file.

Scenario files are flat JSON with ScenarioConfig field names.  Exit code 0
on success, 2 on configuration errors, 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ScenarioConfig
from .errors import InvalidConfigError
from .harness import (
    ChopAnalysis,
    FixedParameterAnalysis,
    get_climatology,
    grid_search,
    run_assimilation,
    run_chop_experiment,
    scenario_ies_config,
)
from .lorenz96 import cached_climatology
from .results import (
    aggregate_chop,
    chop_summary,
    export_run_directory,
    grid_summary,
    records_from_json,
    records_to_json,
    write_summary,
)


def _add_common(parser):
    parser.add_argument("--config", required=True, help="scenario JSON file")
    parser.add_argument("--out-dir", default="results", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override base_seed")
    parser.add_argument("--reps", type=int, default=None, help="override repetitions")
    parser.add_argument("--threads", type=int, default=1, help="parallel worker processes")


def _load_scenario(args) -> ScenarioConfig:
    scenario = ScenarioConfig.from_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if overrides:
        data = scenario.to_dict()
        data.update(overrides)
        scenario = ScenarioConfig.from_dict(data)
    return scenario


def _cmd_climatology(args) -> int:
    clim = cached_climatology(
        n_l=args.n_l,
        n_steps=args.steps,
        dt=args.dt,
        forcing=args.forcing,
        seed=args.seed,
        cache_dir=args.cache_dir,
    )
    print(
        f"climatology n_l={clim.n_l} steps={clim.n_steps}: "
        f"mean[0]={clim.mean[0]:.4f} avg_mean={clim.mean.mean():.4f} "
        f"avg_var={np.diag(clim.covariance).mean():.4f}"
    )
    if args.cache_dir:
        print(f"cached under {args.cache_dir}")
    return 0


def _cmd_grid_search(args) -> int:
    scenario = _load_scenario(args)
    result = grid_search(scenario, workers=args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    export_run_directory(args.out_dir, grid_result=result)
    write_summary(grid_summary(result), os.path.join(args.out_dir, "summary.json"))
    if result.argmin is not None:
        print(
            f"argmin (delta, lambda) = {result.argmin} "
            f"mean RMSE = {result.argmin_mean:.4f}"
        )
    else:
        print("all cells diverged")
    print(f"results written to {args.out_dir}")
    return 0


def _cmd_chop(args) -> int:
    scenario = _load_scenario(args)
    if scenario.method == "grid":
        raise InvalidConfigError("chop subcommand needs method chop-sif or chop-mif")
    result = run_chop_experiment(
        scenario, workers=args.threads, collect_diagnostics=args.dump_cycles
    )
    os.makedirs(args.out_dir, exist_ok=True)
    export_run_directory(args.out_dir, chop_result=result)
    write_summary(chop_summary(result), os.path.join(args.out_dir, "summary.json"))
    records_to_json(result.records, os.path.join(args.out_dir, "records.json"))
    print(f"average RMSE = {result.mean_rmse:.4f} +/- {result.std_rmse:.4f}")
    print(f"results written to {args.out_dir}")
    return 0


def _cmd_single_run(args) -> int:
    scenario = _load_scenario(args)
    if args.delta is not None and args.lam is not None:
        method = FixedParameterAnalysis(args.delta, args.lam)
    elif scenario.method != "grid":
        method = ChopAnalysis(scenario_ies_config(scenario))
    else:
        raise InvalidConfigError("single-run needs --delta/--lambda or a chop-* scenario")
    record = run_assimilation(scenario, method, args.rep, collect_diagnostics=args.dump_cycles)
    os.makedirs(args.out_dir, exist_ok=True)
    records_to_json([record], os.path.join(args.out_dir, "records.json"))
    if record.ies is not None:
        result = aggregate_chop(scenario.to_dict(), [record])
        export_run_directory(args.out_dir, chop_result=result)
    status = "DIVERGED" if record.diverged else f"window RMSE = {record.window_avg_rmse:.4f}"
    print(f"{method.label} rep {args.rep}: {status} over {record.n_cycles} cycles")
    print(f"results written to {args.out_dir}")
    return 0


def _cmd_export(args) -> int:
    records = records_from_json(args.records)
    scenario_id = records[0].scenario_id if records else ""
    result = aggregate_chop({"scenario_id": scenario_id}, records)
    os.makedirs(args.out_dir, exist_ok=True)
    written = export_run_directory(args.out_dir, chop_result=result)
    print("\n".join(written))
    return 0


def _int_list(text: str) -> tuple:
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chop-enkf")
    sub = parser.add_subparsers(dest="command", required=True)

    clim = sub.add_parser("climatology", help="compute and cache the long-run statistics")
    clim.add_argument("--n-l", type=int, default=40)
    clim.add_argument("--steps", type=int, default=100_000)
    clim.add_argument("--dt", type=float, default=0.05)
    clim.add_argument("--forcing", type=float, default=8.0)
    clim.add_argument("--seed", type=int, default=0)
    clim.add_argument("--cache-dir", default=None)
    clim.set_defaults(func=_cmd_climatology)

    grid = sub.add_parser("grid-search", help="fixed-parameter RMSE over the search grid")
    _add_common(grid)
    grid.set_defaults(func=_cmd_grid_search)

    chop = sub.add_parser("chop", help="per-cycle tuned filter, aggregated over repetitions")
    _add_common(chop)
    chop.add_argument(
        "--dump-cycles", type=_int_list, default=(), help="comma-separated cycle numbers to trace"
    )
    chop.set_defaults(func=_cmd_chop)

    single = sub.add_parser("single-run", help="one repetition of one scenario")
    _add_common(single)
    single.add_argument("--rep", type=int, default=0)
    single.add_argument("--delta", type=float, default=None)
    single.add_argument("--lambda", dest="lam", type=float, default=None)
    single.add_argument(
        "--dump-cycles", type=_int_list, default=(), help="comma-separated cycle numbers to trace"
    )
    single.set_defaults(func=_cmd_single_run)

    export = sub.add_parser("export", help="regenerate CSVs from a saved records.json")
    export.add_argument("--records", required=True)
    export.add_argument("--out-dir", default="results")
    export.set_defaults(func=_cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
