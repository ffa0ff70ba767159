"""EnKF analysis with perturbed observations, inflation and gain localization.

This is the parametric mapping the per-cycle hyper-parameter search
optimizes: given a background ensemble, perturbed observations and a
hyper-parameter set (inflation delta, length scale lambda), produce the
analysis ensemble.

Two inflation modes:

* ``sif``: one scalar delta inflates all anomalies; the gain uses the
  uninflated sample covariance with the observation covariance shrunk by
  (1+delta)^2 (the two are algebraically the same thing).
* ``mif``: a length-``n_l`` delta vector inflates each component; the gain
  is built from the inflated-ensemble covariance with C_d unscaled.

Localization is a Schur (elementwise) taper of the assembled Kalman gain;
taper entries are the Gaspari-Cohn function of normalized ring distance
over the length scale.  The observation matrix is never materialized: all
H-products are index extractions.

``enkf_analysis`` applies one shared hyper-parameter set to the whole
ensemble.  ``analyze_members`` gives each member its own hyper-parameters
(the workhorse of the iterative search) and picks between a per-member
dense gain build and an ensemble-subspace path that exploits the circulant
structure of the ring taper via FFT; both produce the same analysis.
"""
from __future__ import annotations

import logging

import numpy as np

from .ensembles import ensemble_mean_and_anomalies, gaspari_cohn
from .errors import InvalidHyperParameterError
from .observations import ObservationBatch, ObservationOperator

logger = logging.getLogger(__name__)

# Above this many gain entries (members * n_l * d) analyze_members switches
# to the subspace/FFT path.
DENSE_GAIN_LIMIT = 4_000_000


def ring_distance(i, j, n_l: int):
    """Normalized cyclic distance min(|i-j|, n_l - |i-j|) / n_l."""
    diff = np.abs(np.asarray(i) - np.asarray(j))
    dist = np.minimum(diff, n_l - diff) / n_l
    if dist.ndim == 0:
        return float(dist)
    return dist


def ring_distance_profile(n_l: int) -> np.ndarray:
    """Normalized ring distance for index offsets 0..n_l-1."""
    offsets = np.arange(n_l)
    return np.minimum(offsets, n_l - offsets) / n_l


def observation_offsets(op: ObservationOperator) -> np.ndarray:
    """(n_l, d) matrix of index offsets (s - o_t) mod n_l.

    Because the taper depends only on this offset, each taper column is a
    cyclic shift of one per-lambda profile; this matrix gathers it.
    """
    rows = np.arange(op.n_l)[:, None]
    return np.mod(rows - op.indices[None, :], op.n_l)


def taper_matrix(lam: float, op: ObservationOperator) -> np.ndarray:
    """Gain taper L[s, t] = f_GC(dist(s, o_t) / lambda), shape (n_l, d)."""
    if lam <= 0:
        raise InvalidHyperParameterError(f"length scale must be positive, got {lam}")
    profile = gaspari_cohn(ring_distance_profile(op.n_l) / lam)
    return profile[observation_offsets(op)]


def inflate(ensemble: np.ndarray, delta) -> np.ndarray:
    """Scale anomalies about the ensemble mean by (1 + delta).

    `delta` is a scalar (single inflation factor) or a length-``n_l``
    vector (one factor per component); the mean is preserved exactly.
    """
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0):
        raise InvalidHyperParameterError("inflation factors must be non-negative")
    if not delta.any():
        return ensemble.copy()
    mean = ensemble.mean(axis=1)
    factor = 1.0 + (delta if delta.ndim == 0 else delta[:, None])
    return mean[:, None] + factor * (ensemble - mean[:, None])


def _check_shapes(background: np.ndarray, obs: ObservationBatch, op: ObservationOperator) -> None:
    if background.shape[0] != op.n_l:
        raise ValueError(f"background dimension {background.shape[0]} != n_l {op.n_l}")
    if obs.d != op.d:
        raise ValueError(f"observation batch size {obs.d} != operator size {op.d}")
    if obs.perturbed.shape[1] != background.shape[1]:
        raise ValueError("perturbed observations and background disagree on member count")


def _validate_theta(delta, lam, mode: str, n_l: int) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if mode == "sif":
        if delta.ndim != 0:
            raise InvalidHyperParameterError("sif expects a scalar inflation factor")
    elif mode == "mif":
        if delta.shape != (n_l,):
            raise InvalidHyperParameterError(f"mif expects a length-{n_l} inflation vector")
    else:
        raise ValueError(f"unknown inflation mode {mode!r}")
    if np.any(delta < 0):
        raise InvalidHyperParameterError("inflation factors must be non-negative")
    if lam <= 0:
        raise InvalidHyperParameterError(f"length scale must be positive, got {lam}")
    return delta


def _gain_solve(b: np.ndarray, p_t: np.ndarray) -> np.ndarray:
    """Solve B X = P^T for the transposed gain; SVD pseudo-inverse fallback.

    Non-finite systems (a blown-up ensemble) yield a NaN gain, which rides
    through as the divergence signal the harness looks for.
    """
    try:
        return np.linalg.solve(b, p_t)
    except np.linalg.LinAlgError:
        if not np.isfinite(b).all():
            return np.full_like(p_t, np.nan)
        logger.warning("innovation covariance solve failed; falling back to pseudo-inverse")
        return np.linalg.pinv(b) @ p_t


def enkf_analysis(
    background: np.ndarray,
    obs: ObservationBatch,
    op: ObservationOperator,
    delta,
    lam: float,
    mode: str = "sif",
    taper: np.ndarray | None = None,
    inflation_target: str = "members",
) -> np.ndarray:
    """Analysis ensemble for one shared hyper-parameter set.

    `inflation_target` selects where (1 + delta) acts; the gain always sees
    the inflated covariance (the three renderings share it):

    * "members": the inflated states enter the innovations and carry the
      update (the textbook form; library default).
    * "forecast": the inflated states carry the update but innovations are
      taken on the raw forecast members.  This is the reference
      fixed-parameter algorithm of the twin experiments; its analysis
      anomalies grow whenever (1 + delta) exceeds the effective gain
      contraction, which is what produces the diverged corner of the
      (delta, lambda) maps at strong inflation and tight localization.
    * "covariance": member states stay unscaled, so the analysis stays
      bounded under arbitrary per-cycle inflation draws (the form the
      per-cycle tuned filter uses).

    `taper` overrides the Gaspari-Cohn taper when given (tests use all-ones
    and all-zeros tapers); otherwise it is built from `lam`.  Non-finite
    output is a divergence signal for the caller, not an exception.
    """
    _check_shapes(background, obs, op)
    delta = _validate_theta(delta, lam, mode, op.n_l)
    if inflation_target not in ("members", "forecast", "covariance"):
        raise ValueError(f"unknown inflation_target {inflation_target!r}")
    mean, anomalies = ensemble_mean_and_anomalies(background)
    idx = op.indices

    if mode == "sif":
        obs_anoms = anomalies[idx]
        cross = anomalies @ obs_anoms.T
        b = obs_anoms @ obs_anoms.T + obs.c_d / (1.0 + delta) ** 2
        factor = 1.0 + delta
    else:
        factor = (1.0 + delta)[:, None]
        inflated_anoms = factor * anomalies
        obs_anoms = inflated_anoms[idx]
        cross = inflated_anoms @ obs_anoms.T
        b = obs_anoms @ obs_anoms.T + obs.c_d

    if inflation_target == "covariance":
        base = background
    else:
        base = mean[:, None] + factor * (background - mean[:, None])
    innovation_states = base if inflation_target == "members" else background

    gain = _gain_solve(b, cross.T).T
    if taper is None:
        taper = taper_matrix(lam, op)
    innovations = obs.perturbed - innovation_states[idx]
    return base + (taper * gain) @ innovations


def analyze_members(
    background: np.ndarray,
    obs: ObservationBatch,
    op: ObservationOperator,
    deltas: np.ndarray,
    lams: np.ndarray,
    mode: str = "sif",
    method: str = "auto",
    taper: np.ndarray | None = None,
    inflation_target: str = "members",
) -> np.ndarray:
    """Analysis where member j uses its own hyper-parameters.

    Column j of the result equals column j of ``enkf_analysis`` run with
    member j's (delta, lambda) and the same `inflation_target`.  `deltas`
    has shape ``(n_e,)`` for sif or ``(n_l, n_e)`` for mif; `lams` has
    shape ``(n_e,)``.

    `method` picks the inner path: "dense" builds each member's tapered
    gain explicitly; "subspace" works in the ensemble subspace (Woodbury)
    and evaluates the taper contraction by cyclic convolution, which is
    what makes the 1000-dimensional runs affordable.  "auto" switches on
    problem size.  Both paths agree to floating-point accuracy.
    """
    _check_shapes(background, obs, op)
    deltas = np.asarray(deltas, dtype=float)
    lams = np.asarray(lams, dtype=float)
    n_e = background.shape[1]
    if mode == "sif":
        if deltas.shape != (n_e,):
            raise InvalidHyperParameterError(f"sif expects deltas of shape ({n_e},)")
    elif mode == "mif":
        if deltas.shape != (op.n_l, n_e):
            raise InvalidHyperParameterError(f"mif expects deltas of shape ({op.n_l}, {n_e})")
    else:
        raise ValueError(f"unknown inflation mode {mode!r}")
    if lams.shape != (n_e,):
        raise InvalidHyperParameterError(f"expected lams of shape ({n_e},)")
    if np.any(deltas < 0) or np.any(lams <= 0):
        raise InvalidHyperParameterError("need deltas >= 0 and lams > 0")
    if inflation_target not in ("members", "forecast", "covariance"):
        raise ValueError(f"unknown inflation_target {inflation_target!r}")

    if method == "auto":
        method = "subspace" if n_e * op.n_l * op.d > DENSE_GAIN_LIMIT else "dense"
    if method == "dense":
        return _members_dense(background, obs, op, deltas, lams, mode, taper, inflation_target)
    if method == "subspace":
        return _members_subspace(background, obs, op, deltas, lams, mode, taper, inflation_target)
    raise ValueError(f"unknown method {method!r}")


def _member_bases(background, deltas, mode, inflation_target):
    """(carried states, innovation states) per member for one rendering."""
    if inflation_target == "covariance":
        return background, background
    mean = background.mean(axis=1)
    centered = background - mean[:, None]
    if mode == "sif":
        base = mean[:, None] + (1.0 + deltas)[None, :] * centered
    else:
        base = mean[:, None] + (1.0 + deltas) * centered
    return base, (base if inflation_target == "members" else background)


def _members_dense(background, obs, op, deltas, lams, mode, taper_override, inflation_target):
    mean, anomalies = ensemble_mean_and_anomalies(background)
    idx = op.indices
    obs_anoms = anomalies[idx]
    cross0 = anomalies @ obs_anoms.T
    b0 = obs_anoms @ obs_anoms.T
    profile = ring_distance_profile(op.n_l)
    offsets = observation_offsets(op)
    base, innovation_states = _member_bases(background, deltas, mode, inflation_target)
    innovations = obs.perturbed - innovation_states[idx]

    analysis = np.empty_like(background)
    for j in range(background.shape[1]):
        if mode == "sif":
            cross = cross0
            b = b0 + obs.c_d / (1.0 + deltas[j]) ** 2
        else:
            v = 1.0 + deltas[:, j]
            cross = v[:, None] * cross0 * v[idx][None, :]
            b = v[idx][:, None] * b0 * v[idx][None, :] + obs.c_d
        gain = _gain_solve(b, cross.T).T
        if taper_override is None:
            taper = gaspari_cohn(profile / lams[j])[offsets]
        else:
            taper = taper_override
        analysis[:, j] = base[:, j] + (taper * gain) @ innovations[:, j]
    return analysis


def _members_subspace(background, obs, op, deltas, lams, mode, taper_override, inflation_target):
    """Per-member analysis via the ensemble-subspace (Woodbury) identity.

    For member j with inflated anomalies S_j, the gain applied to the
    innovation is S_j Q_j W i_j with Q_j = (I + Sn_j' Sn_j)^{-1} Sn_j' in
    normalized observation space (Sn_j = C_d^{-1/2} S_j[idx]).  The Schur
    taper couples model rows and observation columns, but on the ring
    every taper column is a shift of one profile, so the tapered
    contraction is a cyclic convolution; everything is batched over
    members so the FFTs and solves run as single stacked calls.
    """
    mean, anomalies = ensemble_mean_and_anomalies(background)
    n_l, n_e = background.shape
    idx = op.indices
    obs_anoms = anomalies[idx]
    profile = ring_distance_profile(op.n_l)

    w_diag = np.diag(obs.c_d_inv_sqrt)
    diagonal_w = np.count_nonzero(obs.c_d_inv_sqrt - np.diag(w_diag)) == 0

    base, innovation_states = _member_bases(background, deltas, mode, inflation_target)
    innovations = obs.perturbed - innovation_states[idx]
    eye = np.eye(n_e)

    analysis = np.empty_like(background)
    scattered = np.zeros((n_e, n_l))
    for j in range(n_e):
        if mode == "sif":
            v_obs = 1.0 + deltas[j]
            v_model = v_obs
        else:
            v_full = 1.0 + deltas[:, j]
            v_obs = v_full[idx][:, None]
            v_model = v_full
        inflated_obs_anoms = v_obs * obs_anoms
        if diagonal_w:
            normalized = w_diag[:, None] * inflated_obs_anoms
            residual = w_diag * innovations[:, j]
        else:
            normalized = obs.c_d_inv_sqrt @ inflated_obs_anoms
            residual = obs.c_d_inv_sqrt @ innovations[:, j]
        gram = normalized.T @ normalized
        try:
            q = np.linalg.solve(eye + gram, normalized.T)
        except np.linalg.LinAlgError:
            # I + gram is SPD whenever finite; failure means the member blew up
            analysis[:, j] = np.nan
            continue
        if diagonal_w:
            weights = q * residual[None, :]
        else:
            weights = (q @ obs.c_d_inv_sqrt) * innovations[:, j][None, :]

        # The inflation of model rows factors out of the u-contraction.
        if taper_override is None:
            taper_profile = gaspari_cohn(profile / lams[j])
            scattered[:, idx] = weights
            conv = np.fft.irfft(
                np.fft.rfft(scattered, axis=1) * np.fft.rfft(taper_profile)[None, :], n=n_l
            )
            update = v_model * np.einsum("su,us->s", anomalies, conv)
        else:
            gain_rows = anomalies @ weights  # (n_l, d) of K[s, t] * i_t / v_model
            update = v_model * (taper_override * gain_rows).sum(axis=1)
        analysis[:, j] = base[:, j] + update
    return analysis
