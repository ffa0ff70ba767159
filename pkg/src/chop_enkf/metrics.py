"""Scalar performance statistics: RMSE, data mismatch, ensemble spread."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateEnsembleError


def rmse(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Euclidean distance normalized by sqrt(dimension)."""
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if estimate.shape != reference.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {reference.shape}")
    return float(np.linalg.norm(estimate - reference) / np.sqrt(estimate.size))


def data_mismatch(d_pred: np.ndarray, d_o: np.ndarray, c_d: np.ndarray) -> float:
    """Observation-error-weighted squared residual (d_o - d_pred)' C_d^{-1} (d_o - d_pred)."""
    residual = np.asarray(d_o, dtype=float) - np.asarray(d_pred, dtype=float)
    weighted = np.linalg.solve(c_d, residual)
    return float(residual @ weighted)


def ensemble_spread(ensemble: np.ndarray) -> float:
    """Root-mean-square of per-component sample standard deviations (ddof=1)."""
    ensemble = np.asarray(ensemble, dtype=float)
    if ensemble.ndim != 2 or ensemble.shape[1] < 2:
        raise DegenerateEnsembleError("spread needs at least two members")
    sigma = ensemble.std(axis=1, ddof=1)
    return float(np.linalg.norm(sigma) / np.sqrt(sigma.size))
