"""Run records, aggregation, and CSV/JSON export of experiment results.

One RunRecord captures a single assimilation run (one repetition of one
scenario with one analysis method).  Grid and tuned-filter experiments
aggregate repetitions into mean/std window-average RMSE; diverged runs
report NaN.  JSON files encode NaN as null and parse back losslessly.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class CycleMetrics:
    """Analysis-time statistics at one assimilation cycle."""

    time_index: int              # integration step of the analysis
    rmse_of_mean: float          # RMSE of the analysis ensemble mean vs truth
    mean_rmse: float             # average of per-member RMSEs
    data_mismatch_mean: float    # per-member mismatch vs the real observation, averaged
    spread: float


@dataclass
class CycleIesSummary:
    """Compact footprint of one cycle's hyper-parameter search."""

    n_outer: int
    stop_reason: str
    trials_total: int
    accepted_mismatches: list[float]   # initial value then every accepted step
    final_mean_mismatch: float
    min_final_theta_std: float         # smallest per-parameter std of the final ensemble
    taper_min: float
    taper_max: float
    svd_rule_ok: bool


@dataclass
class RunRecord:
    """Everything recorded for one assimilation run."""

    scenario_id: str
    method_label: str
    rep: int
    diverged: bool
    n_cycles: int
    window_avg_rmse: float             # NaN when diverged
    cycles: list[CycleMetrics] = field(default_factory=list)
    ies: list[CycleIesSummary] | None = None
    cell: tuple | None = None          # (delta, lambda) for fixed-parameter runs
    diagnostics: dict = field(default_factory=dict)  # cycle index -> diagnostic rows


@dataclass
class GridCellResult:
    delta: float
    lam: float
    rep_rmse: list[float]
    mean_rmse: float                   # NaN if any repetition diverged
    std_rmse: float
    diverged_count: int


@dataclass
class GridSearchResult:
    scenario: dict
    cells: list[GridCellResult]
    argmin: tuple | None               # (delta, lambda) of the lowest finite cell
    argmin_mean: float


@dataclass
class ChopExperimentResult:
    scenario: dict
    records: list[RunRecord]
    rep_rmse: list[float]
    mean_rmse: float
    std_rmse: float
    diverged_count: int


def aggregate_cell(delta: float, lam: float, rep_rmse: list[float]) -> GridCellResult:
    values = np.asarray(rep_rmse, dtype=float)
    diverged = int(np.sum(~np.isfinite(values)))
    if diverged:
        mean = math.nan
        std = math.nan
    else:
        mean = float(values.mean())
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return GridCellResult(
        delta=delta,
        lam=lam,
        rep_rmse=[float(v) for v in values],
        mean_rmse=mean,
        std_rmse=std,
        diverged_count=diverged,
    )


def aggregate_chop(scenario: dict, records: list[RunRecord]) -> ChopExperimentResult:
    values = np.asarray([r.window_avg_rmse for r in records], dtype=float)
    finite = values[np.isfinite(values)]
    mean = float(finite.mean()) if finite.size else math.nan
    std = float(finite.std(ddof=1)) if finite.size > 1 else 0.0
    return ChopExperimentResult(
        scenario=scenario,
        records=records,
        rep_rmse=[float(v) for v in values],
        mean_rmse=mean,
        std_rmse=std,
        diverged_count=int(np.sum(~np.isfinite(values))),
    )


def _none_for_nan(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _nan_for_none(value):
    if value is None:
        return math.nan
    return value


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return _none_for_nan(obj)


def _restore(obj):
    if isinstance(obj, dict):
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return _nan_for_none(obj)


def write_summary(summary: dict, path: str) -> None:
    """Write a summary dict as JSON (NaN encoded as null)."""
    with open(path, "w") as fh:
        json.dump(_sanitize(summary), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_summary(path: str) -> dict:
    """Parse a summary back, mapping null to NaN (inverse of write_summary)."""
    with open(path) as fh:
        return _restore(json.load(fh))


def grid_summary(result: GridSearchResult) -> dict:
    return {
        "type": "grid",
        "scenario": result.scenario,
        "cells": [
            {
                "delta": c.delta,
                "lambda": c.lam,
                "mean_rmse": c.mean_rmse,
                "std_rmse": c.std_rmse,
                "diverged_count": c.diverged_count,
                "rep_rmse": c.rep_rmse,
            }
            for c in result.cells
        ],
        "argmin": None
        if result.argmin is None
        else {
            "delta": result.argmin[0],
            "lambda": result.argmin[1],
            "mean_rmse": result.argmin_mean,
        },
    }


def chop_summary(result: ChopExperimentResult) -> dict:
    return {
        "type": "chop",
        "scenario": result.scenario,
        "mean_rmse": result.mean_rmse,
        "std_rmse": result.std_rmse,
        "diverged_count": result.diverged_count,
        "repetitions": [
            {
                "rep": r.rep,
                "window_avg_rmse": r.window_avg_rmse,
                "diverged": r.diverged,
                "n_cycles": r.n_cycles,
            }
            for r in result.records
        ],
    }


def export_grid_csv(cells: list[GridCellResult], path: str) -> None:
    """Cell table behind the RMSE heat maps: one row per (delta, lambda)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta", "lambda", "mean_rmse", "std_rmse", "diverged_count"])
        for c in cells:
            writer.writerow([repr(c.delta), repr(c.lam), repr(c.mean_rmse), repr(c.std_rmse), c.diverged_count])


def export_chop_cycles_csv(records: list[RunRecord], path: str) -> None:
    """Per-cycle metrics of tuned-filter runs: one row per (repetition, cycle)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["repetition", "cycle", "time_index", "rmse", "spread", "data_mismatch", "iterations"]
        )
        for record in records:
            ies = record.ies or []
            for k, cm in enumerate(record.cycles):
                iterations = ies[k].n_outer if k < len(ies) else ""
                writer.writerow(
                    [
                        record.rep,
                        k + 1,
                        cm.time_index,
                        repr(cm.rmse_of_mean),
                        repr(cm.spread),
                        repr(cm.data_mismatch_mean),
                        iterations,
                    ]
                )


def export_diagnostics_csv(rows: list[dict], path: str) -> None:
    """Per-iteration search trace for one cycle (box-plot and histogram data)."""
    if not rows:
        header = ["iteration"]
    else:
        header = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[k] if not isinstance(row[k], float) else repr(row[k]) for k in header])


def records_to_json(records: list[RunRecord], path: str) -> None:
    payload = []
    for r in records:
        entry = asdict(r)
        entry["cell"] = list(r.cell) if r.cell is not None else None
        payload.append(entry)
    with open(path, "w") as fh:
        json.dump(_sanitize(payload), fh, sort_keys=True)
        fh.write("\n")


def records_from_json(path: str) -> list[RunRecord]:
    # nulls are restored to NaN only inside fields that hold floats, so that
    # genuinely optional fields (cell, ies) keep their None.
    with open(path) as fh:
        payload = json.load(fh)
    records = []
    for entry in payload:
        cycles = [CycleMetrics(**_restore(c)) for c in entry["cycles"]]
        ies = None
        if entry["ies"] is not None:
            ies = [CycleIesSummary(**_restore(s)) for s in entry["ies"]]
        records.append(
            RunRecord(
                scenario_id=entry["scenario_id"],
                method_label=entry["method_label"],
                rep=entry["rep"],
                diverged=entry["diverged"],
                n_cycles=entry["n_cycles"],
                window_avg_rmse=_nan_for_none(entry["window_avg_rmse"]),
                cycles=cycles,
                ies=ies,
                cell=tuple(entry["cell"]) if entry["cell"] is not None else None,
                diagnostics={int(k): _restore(v) for k, v in entry["diagnostics"].items()},
            )
        )
    return records


def export_run_directory(
    out_dir: str,
    grid_result: GridSearchResult | None = None,
    chop_result: ChopExperimentResult | None = None,
) -> list[str]:
    """Write the standard export set into `out_dir`; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if grid_result is not None:
        grid_csv = os.path.join(out_dir, "grid.csv")
        export_grid_csv(grid_result.cells, grid_csv)
        written.append(grid_csv)
        summary_path = os.path.join(out_dir, "grid_summary.json")
        write_summary(grid_summary(grid_result), summary_path)
        written.append(summary_path)
    if chop_result is not None:
        cycles_csv = os.path.join(out_dir, "chop_cycles.csv")
        export_chop_cycles_csv(chop_result.records, cycles_csv)
        written.append(cycles_csv)
        summary_path = os.path.join(out_dir, "chop_summary.json")
        write_summary(chop_summary(chop_result), summary_path)
        written.append(summary_path)
        for record in chop_result.records:
            for cycle, rows in sorted(record.diagnostics.items()):
                diag_path = os.path.join(
                    out_dir, f"ies_diagnostics_rep{record.rep}_cycle{cycle}.csv"
                )
                export_diagnostics_csv(rows, diag_path)
                written.append(diag_path)
    return written
