"""Exception types raised by the library."""


class InvalidDimensionError(ValueError):
    """Model or matrix dimensions violate a precondition."""


class IntegrationOverflowError(FloatingPointError):
    """Time integration produced non-finite state values."""


class DegenerateEnsembleError(ValueError):
    """Fewer than two ensemble members."""


class DegenerateMatrixError(ValueError):
    """Matrix has no positive singular values."""


class FactorizationError(ValueError):
    """Covariance matrix could not be factorized (not SPD)."""


class InvalidConfigError(ValueError):
    """Scenario or sampler configuration is inconsistent."""


class InvalidHyperParameterError(ValueError):
    """Inflation factor or length scale outside its validity range."""


class UnsupportedEnsembleSizeError(ValueError):
    """Ensemble too small for the correlation-based taper (needs N_e > 9)."""


class CollapsedEnsembleError(ValueError):
    """Hyper-parameter ensemble has zero spread; no update direction."""


class CycleFailureError(RuntimeError):
    """Every ensemble member diverged within one assimilation cycle."""
