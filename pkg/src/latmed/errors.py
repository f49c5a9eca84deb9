"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code taxonomy: configuration and data
problems exit with 2, numerical failures with 3.
"""


class LatmedError(Exception):
    """Base class for all package errors."""


class ConfigError(LatmedError):
    """Invalid model specification or run configuration."""


class DataError(LatmedError):
    """Input data violates a precondition (missing columns, NaNs, ...)."""


class NumericalError(LatmedError):
    """Estimation failed numerically (non-convergence, singularity, ...)."""


class RankDeficiencyError(NumericalError):
    """Moment matrix not invertible; requires at least one
    treatment-covariate interaction in the mediator model."""
