"""EnKF with per-cycle hyper-parameter tuning on the Lorenz-96 testbed."""

from .config import ScenarioConfig
from .enkf import enkf_analysis, inflate, ring_distance, taper_matrix
from .ensembles import (
    TruncatedSvd,
    ensemble_mean_and_anomalies,
    gaspari_cohn,
    latin_hypercube,
    truncated_svd_99,
)
from .harness import grid_search, run_assimilation, run_chop_experiment
from .ies import (
    IesConfig,
    IesDiagnostics,
    average_data_mismatch,
    correlation_taper,
    gamma_from_alpha,
    ies_step,
    predict_observations,
    run_chop_cycle,
)
from .lorenz96 import (
    Climatology,
    generate_truth_and_background,
    rk4_step,
    simulate_climatology,
    tendency,
)
from .metrics import data_mismatch, ensemble_spread, rmse
from .observations import ObservationBatch, build_operator, make_batch, observe, perturb_observations

__all__ = [
    "Climatology",
    "IesConfig",
    "IesDiagnostics",
    "ObservationBatch",
    "ScenarioConfig",
    "TruncatedSvd",
    "average_data_mismatch",
    "build_operator",
    "correlation_taper",
    "data_mismatch",
    "enkf_analysis",
    "ensemble_mean_and_anomalies",
    "ensemble_spread",
    "gamma_from_alpha",
    "gaspari_cohn",
    "generate_truth_and_background",
    "grid_search",
    "ies_step",
    "inflate",
    "latin_hypercube",
    "make_batch",
    "observe",
    "perturb_observations",
    "predict_observations",
    "ring_distance",
    "rk4_step",
    "rmse",
    "run_assimilation",
    "run_chop_cycle",
    "run_chop_experiment",
    "simulate_climatology",
    "taper_matrix",
    "tendency",
    "truncated_svd_99",
]
