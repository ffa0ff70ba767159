"""Shared ensemble kernels: anomalies, truncated SVD, GC taper, LHS.

Ensembles are matrices with members as columns.  Anomaly matrices carry
the conventional 1/sqrt(N_e - 1) scaling so that ``A @ A.T`` is the sample
covariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEnsembleError, DegenerateMatrixError, InvalidConfigError

SVD_ENERGY_FRACTION = 0.99  # keep leading singular values while their cumulative fraction <= this


def ensemble_mean_and_anomalies(ensemble: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise mean and scaled anomalies (member - mean) / sqrt(N_e - 1)."""
    if ensemble.ndim != 2 or ensemble.shape[1] < 2:
        raise DegenerateEnsembleError("need a 2-D ensemble with at least two members")
    n_e = ensemble.shape[1]
    mean = ensemble.mean(axis=1)
    anomalies = (ensemble - mean[:, None]) / np.sqrt(n_e - 1)
    return mean, anomalies


@dataclass
class TruncatedSvd:
    """Leading part of an SVD kept by the 99% singular-value-mass rule."""

    u: np.ndarray                 # (d, r), orthonormal columns
    singular_values: np.ndarray   # (r,), positive, descending
    v: np.ndarray                 # (n_e, r), orthonormal columns
    energy_kept: float            # fraction of total singular-value mass retained

    @property
    def rank(self) -> int:
        return self.singular_values.size


def truncated_svd_99(matrix: np.ndarray) -> TruncatedSvd:
    """Truncated SVD keeping the smallest leading set with <= 99% of the mass.

    r is the largest index whose cumulative singular-value fraction stays
    at or below 99% (so a cumulative fraction of exactly 0.99 is kept),
    with a forced minimum of one retained direction.
    """
    if not np.isfinite(matrix).all():
        raise ValueError("matrix contains non-finite entries")
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    total = s.sum()
    if total <= 0.0:
        raise DegenerateMatrixError("matrix has no positive singular values")
    fractions = np.cumsum(s) / total
    r = max(1, int(np.sum(fractions <= SVD_ENERGY_FRACTION + 1e-12)))
    return TruncatedSvd(
        u=u[:, :r],
        singular_values=s[:r],
        v=vt[:r].T,
        energy_kept=float(s[:r].sum() / total),
    )


def gaspari_cohn(z):
    """Gaspari-Cohn compactly supported quintic correlation function.

    Piecewise on [0, 1], (1, 2] and zero beyond 2; equals 1 at the origin.
    Accepts scalars or arrays of non-negative arguments.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("gaspari_cohn argument must be non-negative")
    out = np.zeros_like(z)
    near = z <= 1.0
    far = (z > 1.0) & (z <= 2.0)
    zn = z[near]
    out[near] = -0.25 * zn**5 + 0.5 * zn**4 + 0.625 * zn**3 - (5.0 / 3.0) * zn**2 + 1.0
    zf = z[far]
    far_values = (
        (1.0 / 12.0) * zf**5
        - 0.5 * zf**4
        + 0.625 * zf**3
        + (5.0 / 3.0) * zf**2
        - 5.0 * zf
        + 4.0
        - (2.0 / 3.0) / zf
    )
    # the outer branch touches zero at z = 2; clamp the roundoff residue
    out[far] = np.maximum(far_values, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def latin_hypercube(ranges, n_e: int, seed) -> np.ndarray:
    """Latin hypercube sample: one point per equal-width stratum per dimension.

    `ranges` is a sequence of (lo, hi) pairs; the result has shape
    ``(len(ranges), n_e)`` with columns as samples.  Strata orderings are
    permuted independently per dimension; deterministic given the seed.
    """
    ranges = np.atleast_2d(np.asarray(ranges, dtype=float))
    if ranges.size == 0:
        raise InvalidConfigError("latin_hypercube needs at least one range")
    if ranges.shape[1] != 2 or np.any(ranges[:, 0] >= ranges[:, 1]):
        raise InvalidConfigError("each range must be (lo, hi) with lo < hi")
    if n_e < 1:
        raise InvalidConfigError("n_e must be at least 1")
    rng = np.random.default_rng(seed)
    h = ranges.shape[0]
    strata = rng.permuted(np.tile(np.arange(n_e), (h, 1)), axis=1)
    jitter = rng.random((h, n_e))
    unit = (strata + jitter) / n_e
    lo = ranges[:, :1]
    hi = ranges[:, 1:]
    return lo + unit * (hi - lo)
