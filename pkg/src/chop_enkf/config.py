"""Twin-experiment scenario configuration.

A scenario fully describes one experiment: model size, ensemble size,
observation density/frequency, windows, seeds, search ranges and the
method (grid search over fixed hyper-parameters, or the per-cycle tuned
filter in single- or multi-factor inflation form).  Scenarios serialize to
flat JSON so runs are reproducible from one file.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InvalidConfigError

METHODS = ("grid", "chop-sif", "chop-mif")


def grid_values(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive arithmetic grid with roundoff-safe endpoints."""
    if step <= 0 or stop < start:
        raise InvalidConfigError(f"bad grid triple ({start}, {stop}, {step})")
    n = int(round((stop - start) / step))
    return np.round(start + step * np.arange(n + 1), 10)


@dataclass
class ScenarioConfig:
    n_l: int = 40
    n_e: int = 30
    delta_n: int = 1                      # observation index increment
    obs_every: int = 4                    # integration steps between observations
    window_units: float = 250.0           # assimilation window, time units
    transition_units: float = 250.0       # spin-up before the window
    dt: float = 0.05
    forcing: float = 8.0
    obs_noise_std: float = 1.0
    repetitions: int = 20
    base_seed: int = 1000
    method: str = "grid"
    delta_grid: tuple = (0.0, 2.0, 0.05)  # (start, stop, step); step refined vs 0.1 so 0.15 is reachable
    lambda_grid: tuple = (0.05, 1.0, 0.05)
    lhs_delta_range: tuple = (0.0, 2.0)
    lhs_lambda_range: tuple = (0.05, 1.0)
    max_outer: int = 10
    max_trials: int = 5
    rel_change_tol: float = 1e-4
    mismatch_threshold_factor: float = 4.0
    localize_ies: bool = True
    chop_inflation_target: str = "covariance"       # mapping used inside the per-cycle search
    reference_inflation_target: str = "forecast"    # fixed-parameter (grid) analysis
    climatology_steps: int = 100_000
    climatology_seed: int = 0
    climatology_burn_in: int = 0
    assimilate_at_t0: bool = False
    divergence_rmse_threshold: float = 1e3
    cache_dir: str | None = None
    label: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        targets = ("covariance", "forecast", "members")
        if self.chop_inflation_target not in targets:
            raise InvalidConfigError(f"chop_inflation_target must be one of {targets}")
        if self.reference_inflation_target not in targets:
            raise InvalidConfigError(f"reference_inflation_target must be one of {targets}")
        if self.obs_every < 1:
            raise InvalidConfigError("obs_every must be >= 1")
        if self.repetitions < 1:
            raise InvalidConfigError("repetitions must be >= 1")
        if self.n_e < 2:
            raise InvalidConfigError("n_e must be >= 2")
        for name in ("window_units", "transition_units"):
            units = getattr(self, name)
            steps = units / self.dt
            if abs(steps - round(steps)) > 1e-9:
                raise InvalidConfigError(f"{name}={units} is not a whole number of dt steps")

    @property
    def window_steps(self) -> int:
        return int(round(self.window_units / self.dt))

    @property
    def transition_steps(self) -> int:
        return int(round(self.transition_units / self.dt))

    @property
    def n_cycles(self) -> int:
        extra = 1 if self.assimilate_at_t0 else 0
        return self.window_steps // self.obs_every + extra

    def delta_values(self) -> np.ndarray:
        return grid_values(*self.delta_grid)

    def lambda_values(self) -> np.ndarray:
        return grid_values(*self.lambda_grid)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["delta_grid"] = list(self.delta_grid)
        out["lambda_grid"] = list(self.lambda_grid)
        out["lhs_delta_range"] = list(self.lhs_delta_range)
        out["lhs_lambda_range"] = list(self.lhs_lambda_range)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown scenario keys: {sorted(unknown)}")
        coerced = dict(data)
        for key in ("delta_grid", "lambda_grid", "lhs_delta_range", "lhs_lambda_range"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def scenario_id(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:10]
