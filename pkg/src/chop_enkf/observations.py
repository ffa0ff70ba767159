"""Linear observation operator on the ring and observation-noise machinery.

The operator extracts every ``delta_n``-th model component starting at
index 0 (model index 1 in 1-based terms).  Observation errors are Gaussian
with covariance ``c_d``; each ensemble member is paired with its own
perturbed copy of the real observation, drawn once per assimilation cycle.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import FactorizationError, InvalidConfigError


@dataclass(frozen=True)
class ObservationOperator:
    """Index-extraction operator: observed components of a state vector."""

    n_l: int
    delta_n: int
    indices: np.ndarray  # (d,) 0-based, strictly increasing

    @property
    def d(self) -> int:
        return self.indices.size

    def __call__(self, state: np.ndarray) -> np.ndarray:
        """Extract observed components (works on vectors and ensembles)."""
        return state[self.indices]


def build_operator(n_l: int, delta_n: int) -> ObservationOperator:
    """Observed indices {0, delta_n, 2*delta_n, ...} below n_l."""
    if delta_n < 1:
        raise InvalidConfigError(f"delta_n must be >= 1, got {delta_n}")
    if delta_n > n_l:
        raise InvalidConfigError(f"delta_n={delta_n} exceeds n_l={n_l}")
    return ObservationOperator(
        n_l=n_l, delta_n=delta_n, indices=np.arange(0, n_l, delta_n, dtype=np.intp)
    )


def observe(op: ObservationOperator, state: np.ndarray, seed, noise_std: float = 1.0) -> np.ndarray:
    """Extract observed components and add white Gaussian noise.

    ``noise_std=0`` gives the exact noiseless extraction (used in tests and
    perfect-observation sanity runs).
    """
    if state.shape[0] != op.n_l:
        raise InvalidConfigError(f"state length {state.shape[0]} != n_l {op.n_l}")
    values = np.asarray(state, dtype=float)[op.indices].copy()
    if noise_std > 0.0:
        rng = np.random.default_rng(seed)
        values += noise_std * rng.standard_normal(op.d)
    return values


def _spd_sqrt_factor(c_d: np.ndarray) -> np.ndarray:
    """Lower-triangular-ish factor A with A @ A.T = c_d (diagonal fast path)."""
    if _is_diagonal(c_d):
        diag = np.diag(c_d)
        if np.any(diag < 0):
            raise FactorizationError("observation covariance has negative variances")
        return np.diag(np.sqrt(diag))
    try:
        return np.linalg.cholesky(c_d)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("observation covariance is not SPD") from exc


def _is_diagonal(matrix: np.ndarray) -> bool:
    return np.count_nonzero(matrix - np.diag(np.diag(matrix))) == 0


def inverse_sqrt(c_d: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of an SPD covariance.

    Elementwise reciprocal square root on the diagonal fast path; symmetric
    eigendecomposition otherwise.
    """
    if _is_diagonal(c_d):
        diag = np.diag(c_d)
        if np.any(diag <= 0):
            raise FactorizationError("observation covariance must be positive definite")
        return np.diag(1.0 / np.sqrt(diag))
    w, u = np.linalg.eigh(c_d)
    if np.any(w <= 0):
        raise FactorizationError("observation covariance must be positive definite")
    return (u / np.sqrt(w)) @ u.T


def perturb_observations(d_o: np.ndarray, c_d: np.ndarray, n_e: int, seed) -> np.ndarray:
    """Per-member perturbed observations d_o + eta_j, eta_j ~ N(0, c_d).

    Drawn once per assimilation cycle; the IES treats the columns as fixed
    data across all its iterations and line-search trials.
    """
    d_o = np.asarray(d_o, dtype=float)
    factor = _spd_sqrt_factor(c_d)
    rng = np.random.default_rng(seed)
    return d_o[:, None] + factor @ rng.standard_normal((d_o.size, n_e))


@dataclass
class ObservationBatch:
    """One cycle's observation data: real, per-member perturbed, error stats."""

    d_o: np.ndarray            # (d,)
    perturbed: np.ndarray      # (d, n_e)
    c_d: np.ndarray            # (d, d) SPD
    c_d_inv_sqrt: np.ndarray   # (d, d)

    @property
    def d(self) -> int:
        return self.d_o.size

    @property
    def n_e(self) -> int:
        return self.perturbed.shape[1]

    def normalize(self, values: np.ndarray) -> np.ndarray:
        """Apply C_d^{-1/2} to a vector or a (d, k) matrix."""
        return self.c_d_inv_sqrt @ values


def make_batch(d_o: np.ndarray, c_d: np.ndarray, n_e: int, seed) -> ObservationBatch:
    return ObservationBatch(
        d_o=np.asarray(d_o, dtype=float),
        perturbed=perturb_observations(d_o, c_d, n_e, seed),
        c_d=np.asarray(c_d, dtype=float),
        c_d_inv_sqrt=inverse_sqrt(np.asarray(c_d, dtype=float)),
    )


def write_observation_log(path: str, records) -> None:
    """Dump one row per cycle: time index, noise seed, observed values.

    `records` yields (time_index, seed, d_o) tuples; kept as CSV so a run's
    observation stream can be re-checked offline.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_index", "noise_seed", "observation"])
        for time_index, seed, d_o in records:
            writer.writerow([time_index, seed, " ".join(repr(float(v)) for v in np.asarray(d_o))])
