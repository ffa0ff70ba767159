"""Lorenz-96 dynamics, RK4 integration and climatology generation.

The model is the cyclic ring of ODEs

    dx_e/dt = (x_{e+1} - x_{e-2}) * x_{e-1} - x_e + F,   e = 1, ..., N_L,

integrated with the classical fourth-order Runge-Kutta scheme at a fixed
step.  Twin experiments bootstrap from the long-run (climatological) mean
and covariance of a single trajectory: the truth initial condition and the
initial background ensemble are Gaussian draws from that climatology.

State vectors have shape ``(n_l,)``; ensembles are stored with members as
columns, shape ``(n_l, n_e)``.  Both layouts share the same tendency/RK4
code (the ring axis is axis 0).
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import FactorizationError, IntegrationOverflowError, InvalidDimensionError

MIN_RING_SIZE = 4  # the advection stencil spans x_{e-2}..x_{e+1}


def tendency(state: np.ndarray, forcing: float) -> np.ndarray:
    """Right-hand side of the Lorenz-96 ODEs.

    ``state`` may be a single vector ``(n_l,)`` or an ensemble
    ``(n_l, n_e)``; the ring axis is axis 0.
    """
    n_l = state.shape[0]
    if n_l < MIN_RING_SIZE:
        raise InvalidDimensionError(f"ring needs at least {MIN_RING_SIZE} variables, got {n_l}")
    x_p1 = np.roll(state, -1, axis=0)
    x_m1 = np.roll(state, 1, axis=0)
    x_m2 = np.roll(state, 2, axis=0)
    return (x_p1 - x_m2) * x_m1 - state + forcing


def rk4_step(state: np.ndarray, dt: float, forcing: float) -> np.ndarray:
    """Advance one classical RK4 step; raises if the state leaves float range."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = tendency(state, forcing)
        k2 = tendency(state + 0.5 * dt * k1, forcing)
        k3 = tendency(state + 0.5 * dt * k2, forcing)
        k4 = tendency(state + dt * k3, forcing)
        out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        raise IntegrationOverflowError("non-finite state after RK4 step")
    return out


def integrate(state: np.ndarray, n_steps: int, dt: float, forcing: float) -> np.ndarray:
    """Apply `n_steps` RK4 steps and return the final state."""
    for _ in range(n_steps):
        state = rk4_step(state, dt, forcing)
    return state


@dataclass
class Climatology:
    """Long-run temporal mean and covariance of one model trajectory."""

    mean: np.ndarray          # (n_l,)
    covariance: np.ndarray    # (n_l, n_l), symmetric PSD up to roundoff
    n_l: int
    forcing: float
    dt: float
    n_steps: int
    seed: int
    burn_in: int


def bootstrap_state(n_l: int, forcing: float) -> np.ndarray:
    """Rest state at the unstable fixed point x_e = F, nudged on component 0."""
    state = np.full(n_l, float(forcing))
    state[0] += 0.01
    return state


def simulate_climatology(
    n_l: int,
    n_steps: int = 100_000,
    dt: float = 0.05,
    forcing: float = 8.0,
    seed: int = 0,
    burn_in: int = 0,
    chunk: int = 4096,
) -> Climatology:
    """Integrate from the bootstrap state and accumulate mean/covariance.

    The state after every integration step is a climatology sample
    (`burn_in` leading samples may be discarded; default keeps all).
    Accumulation is chunked so the trajectory is never stored whole;
    second moments are taken about the first chunk's mean to avoid
    cancellation.
    """
    if n_steps < 10 * n_l:
        raise ValueError(f"n_steps={n_steps} too short for n_l={n_l} (need >= {10 * n_l})")
    if burn_in >= n_steps:
        raise ValueError("burn_in must leave at least one sample")

    state = bootstrap_state(n_l, forcing)
    for _ in range(burn_in):
        state = rk4_step(state, dt, forcing)

    n_keep = n_steps - burn_in
    shift = None
    total = np.zeros(n_l)
    moment2 = np.zeros((n_l, n_l))
    remaining = n_keep
    while remaining > 0:
        block = np.empty((min(chunk, remaining), n_l))
        for i in range(block.shape[0]):
            state = rk4_step(state, dt, forcing)
            block[i] = state
        if shift is None:
            shift = block.mean(axis=0)
        centered = block - shift
        total += centered.sum(axis=0)
        moment2 += centered.T @ centered
        remaining -= block.shape[0]

    mean_centered = total / n_keep
    cov = (moment2 - n_keep * np.outer(mean_centered, mean_centered)) / (n_keep - 1)
    cov = 0.5 * (cov + cov.T)
    return Climatology(
        mean=shift + mean_centered,
        covariance=cov,
        n_l=n_l,
        forcing=forcing,
        dt=dt,
        n_steps=n_steps,
        seed=seed,
        burn_in=burn_in,
    )


def save_climatology(clim: Climatology, path: str) -> None:
    """Persist mean, covariance and the generating parameters to one .npz file."""
    np.savez(
        path,
        mean=clim.mean,
        covariance=clim.covariance,
        params=np.array(
            [clim.n_l, clim.forcing, clim.dt, clim.n_steps, clim.seed, clim.burn_in]
        ),
    )


def load_climatology(path: str) -> Climatology:
    with np.load(path) as data:
        params = data["params"]
        return Climatology(
            mean=data["mean"],
            covariance=data["covariance"],
            n_l=int(params[0]),
            forcing=float(params[1]),
            dt=float(params[2]),
            n_steps=int(params[3]),
            seed=int(params[4]),
            burn_in=int(params[5]),
        )


def climatology_cache_name(
    n_l: int, forcing: float, dt: float, n_steps: int, seed: int, burn_in: int = 0
) -> str:
    return f"clim_n{n_l}_F{forcing:g}_dt{dt:g}_steps{n_steps}_seed{seed}_burn{burn_in}.npz"


def cached_climatology(
    n_l: int,
    n_steps: int = 100_000,
    dt: float = 0.05,
    forcing: float = 8.0,
    seed: int = 0,
    burn_in: int = 0,
    cache_dir: str | None = None,
) -> Climatology:
    """Return the climatology for these parameters, computing it at most once.

    When `cache_dir` is given the result is stored there as .npz and reused
    by later calls (the expensive run is keyed on every generating
    parameter).  Writes go through a temp file so concurrent processes
    never observe a partial cache entry.
    """
    if cache_dir is None:
        return simulate_climatology(n_l, n_steps, dt, forcing, seed, burn_in)
    path = os.path.join(
        cache_dir, climatology_cache_name(n_l, forcing, dt, n_steps, seed, burn_in)
    )
    if os.path.exists(path):
        return load_climatology(path)
    clim = simulate_climatology(n_l, n_steps, dt, forcing, seed, burn_in)
    os.makedirs(cache_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".npz")
    os.close(fd)
    try:
        save_climatology(clim, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return clim


def gaussian_ensemble(mean: np.ndarray, cov: np.ndarray, n: int, rng) -> np.ndarray:
    """Draw `n` samples (columns) from N(mean, cov).

    Uses the symmetric eigendecomposition square root with negative
    eigenvalues clamped to zero, which tolerates the slight indefiniteness
    of sample covariances.
    """
    rng = np.random.default_rng(rng)
    try:
        w, u = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("covariance eigendecomposition failed") from exc
    if not np.isfinite(w).all():
        raise FactorizationError("covariance has non-finite eigenvalues")
    root = u * np.sqrt(np.clip(w, 0.0, None))
    return mean[:, None] + root @ rng.standard_normal((mean.size, n))


def generate_truth_and_background(
    clim: Climatology,
    transition_steps: int,
    window_steps: int,
    n_e: int,
    seed,
) -> tuple[np.ndarray, np.ndarray]:
    """Build the reference trajectory and the initial background ensemble.

    One climatological draw is integrated `transition_steps` to reach the
    attractor; the state there starts the reference (truth) trajectory,
    returned at every integration step of the assimilation window, shape
    ``(window_steps + 1, n_l)`` with row 0 the window start.  The background
    ensemble is `n_e` fresh climatological draws, shape ``(n_l, n_e)``.
    """
    if transition_steps <= 0 or window_steps <= 0:
        raise ValueError("transition_steps and window_steps must be positive")
    rng = np.random.default_rng(seed)
    start = gaussian_ensemble(clim.mean, clim.covariance, 1, rng)[:, 0]
    state = integrate(start, transition_steps, clim.dt, clim.forcing)
    trajectory = np.empty((window_steps + 1, clim.n_l))
    trajectory[0] = state
    for k in range(1, window_steps + 1):
        state = rk4_step(state, clim.dt, clim.forcing)
        trajectory[k] = state
    ensemble = gaussian_ensemble(clim.mean, clim.covariance, n_e, rng)
    return trajectory, ensemble
