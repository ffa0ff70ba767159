"""Per-cycle hyper-parameter estimation with an iterative ensemble smoother.

Each assimilation cycle re-initializes an ensemble of hyper-parameter
vectors by Latin hypercube sampling and iterates a regularized
Gauss-Newton update that needs no gradients: the sensitivity of predicted
observations to the hyper-parameters is estimated from the ensemble
itself, stabilized by a truncated SVD, and the regularization weight gamma
is trace-matched to the retained spectrum through a tunable coefficient
alpha.  A backtracking trial loop doubles alpha (shrinking the step) until
the ensemble-average data mismatch improves; accepted steps relax alpha by
0.9.  Correlation-based localization tapers the update so each
hyper-parameter only feels innovations it is plausibly coupled to.

Hyper-parameter vectors are columns: shape ``(h, n_e)`` with h = 2 for a
single inflation factor ([delta, lambda]) and h = n_l + 1 for per-component
factors ([delta_1..delta_n_l, lambda]).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .enkf import analyze_members, enkf_analysis
from .ensembles import TruncatedSvd, ensemble_mean_and_anomalies, latin_hypercube, truncated_svd_99
from .errors import CollapsedEnsembleError, CycleFailureError, UnsupportedEnsembleSizeError
from .metrics import ensemble_spread, rmse
from .observations import ObservationBatch, ObservationOperator


@dataclass
class IesConfig:
    """Search configuration for one assimilation cycle."""

    ranges: np.ndarray            # (h, 2) LHS ranges; also the clamp bounds
    mode: str = "sif"             # "sif" | "mif"
    alpha0: float = 1.0
    max_outer: int = 10
    max_trials: int = 5
    rel_change_tol: float = 1e-4          # 0.01% relative mismatch change
    mismatch_threshold_factor: float = 4.0  # stop below factor * #observations
    localize: bool = True
    inflation_target: str = "covariance"  # where (1 + delta) acts in the mapping


def sif_ranges(delta_range=(0.0, 2.0), lambda_range=(0.05, 1.0)) -> np.ndarray:
    return np.array([delta_range, lambda_range], dtype=float)


def mif_ranges(n_l: int, delta_range=(0.0, 2.0), lambda_range=(0.05, 1.0)) -> np.ndarray:
    return np.array([delta_range] * n_l + [lambda_range], dtype=float)


@dataclass
class IterationRecord:
    """State of the search after one outer iteration (index 0 = LHS init)."""

    iteration: int
    alpha: float
    gamma: float
    n_trials: int
    accepted: bool
    member_mismatch: np.ndarray   # (n_e,) per-member data mismatch
    mean_mismatch: float
    mean_rmse: float              # NaN when no reference state was supplied
    spread: float
    taper_min: float = np.nan     # extreme taper entries (NaN when unlocalized)
    taper_max: float = np.nan
    svd_rank: int = 0
    svd_energy_kept: float = np.nan


@dataclass
class IesDiagnostics:
    """Per-iteration record of one cycle's search, plus why it stopped."""

    records: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def n_outer(self) -> int:
        return len(self.records) - 1

    def accepted_mismatches(self) -> list[float]:
        """Mismatch path through the initial value and all accepted steps."""
        path = [self.records[0].mean_mismatch]
        path.extend(r.mean_mismatch for r in self.records[1:] if r.accepted)
        return path

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            mm = r.member_mismatch
            rows.append(
                {
                    "iteration": r.iteration,
                    "alpha": r.alpha,
                    "gamma": r.gamma,
                    "trials": r.n_trials,
                    "accepted": int(r.accepted),
                    "mismatch_mean": r.mean_mismatch,
                    "mismatch_min": float(np.min(mm)),
                    "mismatch_p25": float(np.percentile(mm, 25)),
                    "mismatch_p50": float(np.percentile(mm, 50)),
                    "mismatch_p75": float(np.percentile(mm, 75)),
                    "mismatch_max": float(np.max(mm)),
                    "mean_rmse": r.mean_rmse,
                    "spread": r.spread,
                }
            )
        return rows


class EnkfMapping:
    """The EnKF analysis as a member-wise function of hyper-parameters.

    Member j of the hyper-parameter ensemble is applied to member j of the
    (fixed) background with member j's perturbed observation; the predicted
    observation is the observed part of the resulting analysis state.

    `inflation_target` defaults to "covariance" (inflation acts on the
    gain's covariance, member states unscaled): with hyper-parameters
    re-drawn from broad ranges every cycle, inflating the member states
    themselves pumps unobserved-component variance without bound, whereas
    the covariance-only form stays stable for any admissible draw.
    """

    def __init__(
        self,
        background: np.ndarray,
        obs: ObservationBatch,
        op: ObservationOperator,
        mode: str = "sif",
        inflation_target: str = "covariance",
    ):
        self.background = background
        self.obs = obs
        self.op = op
        self.mode = mode
        self.inflation_target = inflation_target
        self.h = 2 if mode == "sif" else op.n_l + 1

    def split(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Decode a (h, n_e) ensemble into inflation factors and length scales."""
        if self.mode == "sif":
            return thetas[0], thetas[1]
        return thetas[: self.op.n_l], thetas[self.op.n_l]

    def evaluate_members(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        deltas, lams = self.split(thetas)
        states = analyze_members(
            self.background,
            self.obs,
            self.op,
            deltas,
            lams,
            self.mode,
            inflation_target=self.inflation_target,
        )
        return states, states[self.op.indices]

    def evaluate_shared(self, theta: np.ndarray) -> np.ndarray:
        """Predicted observations when every member shares one theta."""
        if self.mode == "sif":
            delta, lam = theta[0], theta[1]
        else:
            delta, lam = theta[: self.op.n_l], theta[self.op.n_l]
        states = enkf_analysis(
            self.background,
            self.obs,
            self.op,
            delta,
            lam,
            self.mode,
            inflation_target=self.inflation_target,
        )
        return states[self.op.indices]


def predict_observations(
    thetas: np.ndarray,
    background: np.ndarray,
    obs: ObservationBatch,
    op: ObservationOperator,
    mode: str = "sif",
    inflation_target: str = "covariance",
) -> np.ndarray:
    """Predicted observations g(theta_j) for every member, shape (d, n_e)."""
    mapping = EnkfMapping(background, obs, op, mode, inflation_target)
    return mapping.evaluate_members(thetas)[1]


def member_data_mismatch(predicted: np.ndarray, obs: ObservationBatch) -> np.ndarray:
    """Per-member C_d^{-1}-weighted squared residual against its own perturbed obs."""
    residuals = obs.normalize(obs.perturbed - predicted)
    return np.sum(residuals * residuals, axis=0)


def average_data_mismatch(predicted: np.ndarray, obs: ObservationBatch) -> float:
    return float(np.mean(member_data_mismatch(predicted, obs)))


def gamma_from_alpha(alpha: float, svd: TruncatedSvd) -> float:
    """Trace-matched regularization weight: alpha times the mean kept sigma^2."""
    return float(alpha * np.mean(svd.singular_values**2))


def correlation_taper(thetas: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Localization matrix from hyper-parameter/innovation sample correlations.

    Entry (s, t) is f_GC((1 - |rho_st|) / (1 - 3/sqrt(N_e))) with rho the
    Pearson correlation across members between hyper-parameter s and
    normalized innovation t.  Rows or columns with zero variance get
    rho = 0 (no usable signal).  Requires N_e > 9 so the sampling-error
    scale 3/sqrt(N_e) stays below 1.
    """
    from .ensembles import gaspari_cohn

    n_e = thetas.shape[1]
    if n_e <= 9:
        raise UnsupportedEnsembleSizeError(f"correlation taper needs N_e > 9, got {n_e}")
    if residuals.shape[1] != n_e:
        raise ValueError("hyper-parameters and innovations disagree on member count")

    theta_c = thetas - thetas.mean(axis=1, keepdims=True)
    resid_c = residuals - residuals.mean(axis=1, keepdims=True)
    theta_norm = np.linalg.norm(theta_c, axis=1)
    resid_norm = np.linalg.norm(resid_c, axis=1)
    theta_unit = np.divide(
        theta_c, theta_norm[:, None], out=np.zeros_like(theta_c), where=theta_norm[:, None] > 0
    )
    resid_unit = np.divide(
        resid_c, resid_norm[:, None], out=np.zeros_like(resid_c), where=resid_norm[:, None] > 0
    )
    rho = np.clip(theta_unit @ resid_unit.T, -1.0, 1.0)
    return gaspari_cohn((1.0 - np.abs(rho)) / (1.0 - 3.0 / np.sqrt(n_e)))


def _theta_anomalies(thetas: np.ndarray) -> np.ndarray:
    _, s_theta = ensemble_mean_and_anomalies(thetas)
    if not s_theta.any():
        raise CollapsedEnsembleError("hyper-parameter ensemble has zero spread")
    return s_theta


def _apply_update(
    thetas: np.ndarray,
    s_theta: np.ndarray,
    svd: TruncatedSvd,
    residuals: np.ndarray,
    gamma: float,
    taper: np.ndarray | None,
    bounds: np.ndarray | None,
) -> np.ndarray:
    """theta_j += (L o K) (d~_j - g~_j) with K = S_theta V S (S^2 + g I)^-1 U'."""
    sigma = svd.singular_values
    filt = sigma / (sigma**2 + gamma)
    gain = ((s_theta @ svd.v) * filt[None, :]) @ svd.u.T
    if taper is not None:
        gain = taper * gain
    updated = thetas + gain @ residuals
    if bounds is not None:
        np.clip(updated, bounds[:, 0][:, None], bounds[:, 1][:, None], out=updated)
    return updated


def ies_step(
    thetas: np.ndarray,
    predicted: np.ndarray,
    predicted_at_mean: np.ndarray,
    obs: ObservationBatch,
    gamma: float,
    taper: np.ndarray | None = None,
    bounds: np.ndarray | None = None,
) -> np.ndarray:
    """One regularized update of the hyper-parameter ensemble.

    `predicted` holds g(theta_j) per member; `predicted_at_mean` holds the
    mapping evaluated at the ensemble-mean hyper-parameter (the centering
    point of the sensitivity anomalies, which costs the caller one extra
    mapping evaluation).  `taper=None` means no localization.
    """
    s_theta = _theta_anomalies(thetas)
    n_e = thetas.shape[1]
    s_g = obs.normalize((predicted - predicted_at_mean) / np.sqrt(n_e - 1))
    svd = truncated_svd_99(s_g)
    residuals = obs.normalize(obs.perturbed - predicted)
    return _apply_update(thetas, s_theta, svd, residuals, gamma, taper, bounds)


def run_chop_cycle(
    background: np.ndarray,
    obs: ObservationBatch,
    op: ObservationOperator,
    config: IesConfig,
    seed,
    reference: np.ndarray | None = None,
    mapping=None,
) -> tuple[np.ndarray, np.ndarray, IesDiagnostics]:
    """Tune hyper-parameters for one cycle and return the resulting analysis.

    Starts from a fresh Latin hypercube draw over `config.ranges`, iterates
    the regularized update with backtracking on the ensemble-average data
    mismatch, and stops on: `max_outer` iterations, relative mismatch
    change below `rel_change_tol` between consecutive accepted steps, or
    mismatch below ``mismatch_threshold_factor * d``.  The analysis is the
    mapping output at the final hyper-parameter ensemble.

    `mapping` defaults to the EnKF analysis; anything exposing
    ``evaluate_members``/``evaluate_shared`` can stand in (tests use a
    linear toy).  `reference` (truth state) only feeds the RMSE diagnostics.
    """
    if mapping is None:
        mapping = EnkfMapping(background, obs, op, config.mode, config.inflation_target)
    n_e = obs.n_e
    rng = np.random.default_rng(seed)

    thetas = latin_hypercube(config.ranges, n_e, rng)
    states, predicted = mapping.evaluate_members(thetas)
    member_mm = member_data_mismatch(predicted, obs)
    if not np.isfinite(member_mm).any():
        raise CycleFailureError("every member diverged on the initial hyper-parameters")
    current = float(np.mean(member_mm))

    diagnostics = IesDiagnostics()

    def record(iteration, alpha, gamma, trials, accepted, taper=None, svd=None):
        mean_rmse = np.nan
        if reference is not None:
            mean_rmse = float(np.mean([rmse(states[:, j], reference) for j in range(n_e)]))
        diagnostics.records.append(
            IterationRecord(
                iteration=iteration,
                alpha=alpha,
                gamma=gamma,
                n_trials=trials,
                accepted=accepted,
                member_mismatch=member_mm.copy(),
                mean_mismatch=float(np.mean(member_mm)),
                mean_rmse=mean_rmse,
                spread=ensemble_spread(states),
                taper_min=float(taper.min()) if taper is not None else np.nan,
                taper_max=float(taper.max()) if taper is not None else np.nan,
                svd_rank=svd.rank if svd is not None else 0,
                svd_energy_kept=svd.energy_kept if svd is not None else np.nan,
            )
        )

    record(0, np.nan, np.nan, 0, False)

    threshold = config.mismatch_threshold_factor * obs.d
    stop_reason = "abs-threshold" if current < threshold else ""
    alpha = config.alpha0
    best_accepted = current
    iteration = 0

    while not stop_reason and iteration < config.max_outer:
        iteration += 1
        if not np.isfinite(predicted).all():
            raise CycleFailureError("mapping produced non-finite predictions")
        predicted_at_mean = mapping.evaluate_shared(thetas.mean(axis=1))
        s_theta = _theta_anomalies(thetas)
        s_g = obs.normalize((predicted - predicted_at_mean) / np.sqrt(n_e - 1))
        svd = truncated_svd_99(s_g)
        residuals = obs.normalize(obs.perturbed - predicted)
        taper = correlation_taper(thetas, residuals) if config.localize else None

        trials = 0
        alpha_try = alpha
        accepted = False
        while True:
            gamma = gamma_from_alpha(alpha_try, svd)
            proposal = _apply_update(
                thetas, s_theta, svd, residuals, gamma, taper, config.ranges
            )
            states_new, predicted_new = mapping.evaluate_members(proposal)
            member_mm_new = member_data_mismatch(predicted_new, obs)
            candidate = float(np.mean(member_mm_new))
            if candidate < best_accepted:
                accepted = True
                break
            trials += 1
            if trials > config.max_trials:
                break
            alpha_try = 2.0 * alpha_try

        # The last trial's ensemble is kept even when no trial improved.
        thetas, states, predicted, member_mm = proposal, states_new, predicted_new, member_mm_new
        current = candidate
        alpha = 0.9 * alpha if (accepted and trials == 0) else alpha_try
        record(iteration, alpha, gamma, trials, accepted, taper=taper, svd=svd)

        if accepted:
            relative_change = abs(current - best_accepted) / best_accepted
            best_accepted = current
            if relative_change < config.rel_change_tol:
                stop_reason = "rel-change"
        if not stop_reason and current < threshold:
            stop_reason = "abs-threshold"

    diagnostics.stop_reason = stop_reason or "max-iter"
    return states, thetas, diagnostics
