"""Twin-experiment orchestration: forecast/analysis loop, grid search, tuned runs.

A repetition derives all of its randomness (truth draw, initial ensemble,
observation noise, perturbed observations, per-cycle LHS) from
``base_seed + rep`` through independent child streams, so repetitions and
grid cells can run in any order or in parallel with identical results, and
the same repetition sees identical data under every method.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig
from .enkf import enkf_analysis
from .errors import CycleFailureError, IntegrationOverflowError
from .ies import IesConfig, mif_ranges, run_chop_cycle, sif_ranges
from .lorenz96 import Climatology, cached_climatology, generate_truth_and_background, rk4_step
from .metrics import ensemble_spread, rmse
from .observations import build_operator, make_batch, observe
from .results import (
    ChopExperimentResult,
    CycleIesSummary,
    CycleMetrics,
    GridSearchResult,
    RunRecord,
    aggregate_cell,
    aggregate_chop,
)

# Sub-stream indices under each repetition's seed.
_STREAM_INIT, _STREAM_NOISE, _STREAM_PERTURB, _STREAM_LHS = 0, 1, 2, 3

# Per-process memo of expensive climatologies, keyed by generating params.
_climatology_memo: dict = {}


@dataclass
class Streams:
    """Independent per-repetition random streams."""

    init: np.random.Generator      # truth draw + initial ensemble
    noise: np.random.Generator     # observation noise, advanced cycle by cycle
    perturb: np.random.Generator   # per-member observation perturbations
    lhs: np.random.Generator       # per-cycle hyper-parameter initialization


def repetition_streams(base_seed: int, rep: int) -> Streams:
    root = np.random.SeedSequence(base_seed + rep)
    children = root.spawn(4)
    return Streams(
        init=np.random.default_rng(children[_STREAM_INIT]),
        noise=np.random.default_rng(children[_STREAM_NOISE]),
        perturb=np.random.default_rng(children[_STREAM_PERTURB]),
        lhs=np.random.default_rng(children[_STREAM_LHS]),
    )


def get_climatology(scenario: ScenarioConfig) -> Climatology:
    key = (
        scenario.n_l,
        scenario.forcing,
        scenario.dt,
        scenario.climatology_steps,
        scenario.climatology_seed,
        scenario.climatology_burn_in,
    )
    if key not in _climatology_memo:
        _climatology_memo[key] = cached_climatology(
            n_l=scenario.n_l,
            n_steps=scenario.climatology_steps,
            dt=scenario.dt,
            forcing=scenario.forcing,
            seed=scenario.climatology_seed,
            burn_in=scenario.climatology_burn_in,
            cache_dir=scenario.cache_dir,
        )
    return _climatology_memo[key]


def scenario_ies_config(scenario: ScenarioConfig) -> IesConfig:
    if scenario.method == "chop-mif":
        ranges = mif_ranges(scenario.n_l, scenario.lhs_delta_range, scenario.lhs_lambda_range)
        mode = "mif"
    else:
        ranges = sif_ranges(scenario.lhs_delta_range, scenario.lhs_lambda_range)
        mode = "sif"
    return IesConfig(
        ranges=ranges,
        mode=mode,
        max_outer=scenario.max_outer,
        max_trials=scenario.max_trials,
        rel_change_tol=scenario.rel_change_tol,
        mismatch_threshold_factor=scenario.mismatch_threshold_factor,
        localize=scenario.localize_ies,
        inflation_target=scenario.chop_inflation_target,
    )


class FixedParameterAnalysis:
    """Analysis method with one fixed (delta, lambda) for the whole run.

    Defaults to the "forecast" inflation rendering (inflated carried
    states, innovations on the raw forecast), the behavior of the
    reference algorithm in the twin experiments.
    """

    def __init__(self, delta: float, lam: float, mode: str = "sif", inflation_target: str = "forecast"):
        self.delta = delta
        self.lam = lam
        self.mode = mode
        self.inflation_target = inflation_target

    @property
    def label(self) -> str:
        return f"fixed({self.delta:g},{self.lam:g})"

    @property
    def cell(self):
        return (self.delta, self.lam)

    def __call__(self, background, batch, op, streams, reference):
        analysis = enkf_analysis(
            background, batch, op, self.delta, self.lam, self.mode,
            inflation_target=self.inflation_target,
        )
        return analysis, None, None


class ChopAnalysis:
    """Analysis method that re-tunes hyper-parameters every cycle."""

    def __init__(self, config: IesConfig):
        self.config = config

    @property
    def label(self) -> str:
        return f"chop-{self.config.mode}"

    @property
    def cell(self):
        return None

    def __call__(self, background, batch, op, streams, reference):
        states, thetas, diagnostics = run_chop_cycle(
            background, batch, op, self.config, seed=streams.lhs, reference=reference
        )
        inner = diagnostics.records[1:]
        taper_values = [r.taper_min for r in inner] + [r.taper_max for r in inner]
        taper_values = [v for v in taper_values if not math.isnan(v)]
        summary = CycleIesSummary(
            n_outer=diagnostics.n_outer,
            stop_reason=diagnostics.stop_reason,
            trials_total=int(sum(r.n_trials for r in inner)),
            accepted_mismatches=diagnostics.accepted_mismatches(),
            final_mean_mismatch=diagnostics.records[-1].mean_mismatch,
            min_final_theta_std=float(thetas.std(axis=1, ddof=1).min()),
            taper_min=min(taper_values) if taper_values else math.nan,
            taper_max=max(taper_values) if taper_values else math.nan,
            svd_rule_ok=all(
                r.svd_energy_kept <= 0.99 + 1e-9 or r.svd_rank == 1 for r in inner
            ),
        )
        return states, summary, diagnostics


def method_for_scenario(scenario: ScenarioConfig, cell=None):
    """Build the analysis method a scenario calls for.

    For grid scenarios `cell` picks the (delta, lambda) pair; tuned
    scenarios ignore it.
    """
    if scenario.method == "grid":
        if cell is None:
            raise ValueError("grid scenarios need an explicit (delta, lambda) cell")
        return FixedParameterAnalysis(
            cell[0], cell[1], inflation_target=scenario.reference_inflation_target
        )
    return ChopAnalysis(scenario_ies_config(scenario))


def run_assimilation(
    scenario: ScenarioConfig,
    method,
    rep: int,
    climatology: Climatology | None = None,
    collect_diagnostics=(),
) -> RunRecord:
    """One full assimilation run: forecast / observe / analyze over the window.

    The run aborts cleanly and is marked diverged when any member goes
    non-finite or the cycle RMSE exceeds the configured threshold; diverged
    runs have NaN window-average RMSE.  `collect_diagnostics` lists cycle
    numbers (1-based) whose full per-iteration search trace is kept.
    """
    clim = climatology if climatology is not None else get_climatology(scenario)
    streams = repetition_streams(scenario.base_seed, rep)
    truth, ensemble = generate_truth_and_background(
        clim, scenario.transition_steps, scenario.window_steps, scenario.n_e, seed=streams.init
    )
    op = build_operator(scenario.n_l, scenario.delta_n)
    c_d = scenario.obs_noise_std**2 * np.eye(op.d)
    collect = set(collect_diagnostics)

    steps = list(range(scenario.obs_every, scenario.window_steps + 1, scenario.obs_every))
    if scenario.assimilate_at_t0:
        steps = [0] + steps

    cycles: list[CycleMetrics] = []
    summaries: list[CycleIesSummary] = []
    diagnostics_out: dict[int, list[dict]] = {}
    diverged = False

    for cycle, step in enumerate(steps, start=1):
        try:
            for _ in range(scenario.obs_every if step > 0 else 0):
                ensemble = rk4_step(ensemble, scenario.dt, scenario.forcing)
        except IntegrationOverflowError:
            diverged = True
            break

        x_true = truth[step]
        d_o = observe(op, x_true, seed=streams.noise, noise_std=scenario.obs_noise_std)
        batch = make_batch(d_o, c_d, scenario.n_e, seed=streams.perturb)
        try:
            analysis, summary, diagnostics = method(ensemble, batch, op, streams, x_true)
        except CycleFailureError:
            diverged = True
            break
        if not np.isfinite(analysis).all():
            diverged = True
            break

        analysis_mean = analysis.mean(axis=1)
        member_rmse = np.linalg.norm(analysis - x_true[:, None], axis=0) / np.sqrt(scenario.n_l)
        obs_residuals = batch.normalize(analysis[op.indices] - d_o[:, None])
        metrics = CycleMetrics(
            time_index=step,
            rmse_of_mean=rmse(analysis_mean, x_true),
            mean_rmse=float(member_rmse.mean()),
            data_mismatch_mean=float(np.mean(np.sum(obs_residuals**2, axis=0))),
            spread=ensemble_spread(analysis),
        )
        cycles.append(metrics)
        if summary is not None:
            summaries.append(summary)
            if cycle in collect:
                diagnostics_out[cycle] = diagnostics.to_rows()
        if metrics.rmse_of_mean > scenario.divergence_rmse_threshold:
            diverged = True
            break
        ensemble = analysis

    window_avg = (
        float(np.mean([c.rmse_of_mean for c in cycles])) if cycles and not diverged else math.nan
    )
    return RunRecord(
        scenario_id=scenario.scenario_id(),
        method_label=method.label,
        rep=rep,
        diverged=diverged,
        n_cycles=len(cycles),
        window_avg_rmse=window_avg,
        cycles=cycles,
        ies=summaries if summaries else None,
        cell=method.cell,
        diagnostics=diagnostics_out,
    )


def _grid_task(args):
    scenario, delta, lam, rep = args
    method = FixedParameterAnalysis(
        delta, lam, inflation_target=scenario.reference_inflation_target
    )
    record = run_assimilation(scenario, method, rep)
    return delta, lam, rep, record.window_avg_rmse


def _chop_task(args):
    scenario, rep, collect = args
    method = ChopAnalysis(scenario_ies_config(scenario))
    return run_assimilation(scenario, method, rep, collect_diagnostics=collect)


def _run_tasks(worker, tasks, workers: int):
    if workers <= 1:
        return [worker(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks))


def grid_search(scenario: ScenarioConfig, workers: int = 1) -> GridSearchResult:
    """Mean window-average RMSE over repetitions for every (delta, lambda) cell.

    A cell is NaN as soon as any repetition diverges.  Returns the finite
    argmin cell alongside the full table.
    """
    get_climatology(scenario)  # warm the disk cache before forking workers
    deltas = scenario.delta_values()
    lams = scenario.lambda_values()
    tasks = [
        (scenario, float(d), float(l), rep)
        for d in deltas
        for l in lams
        for rep in range(scenario.repetitions)
    ]
    outcomes = _run_tasks(_grid_task, tasks, workers)

    by_cell: dict[tuple, dict[int, float]] = {}
    for delta, lam, rep, value in outcomes:
        by_cell.setdefault((delta, lam), {})[rep] = value
    cells = [
        aggregate_cell(delta, lam, [reps[r] for r in sorted(reps)])
        for (delta, lam), reps in sorted(by_cell.items())
    ]

    argmin = None
    argmin_mean = math.inf
    for cell in cells:
        if not math.isnan(cell.mean_rmse) and cell.mean_rmse < argmin_mean:
            argmin = (cell.delta, cell.lam)
            argmin_mean = cell.mean_rmse
    if argmin is None:
        argmin_mean = math.nan
    return GridSearchResult(
        scenario=scenario.to_dict(), cells=cells, argmin=argmin, argmin_mean=argmin_mean
    )


def run_chop_experiment(
    scenario: ScenarioConfig, workers: int = 1, collect_diagnostics=()
) -> ChopExperimentResult:
    """Repetitions of the per-cycle tuned filter, aggregated to mean +/- std."""
    get_climatology(scenario)
    tasks = [(scenario, rep, tuple(collect_diagnostics)) for rep in range(scenario.repetitions)]
    records = _run_tasks(_chop_task, tasks, workers)
    records.sort(key=lambda r: r.rep)
    return aggregate_chop(scenario.to_dict(), records)
