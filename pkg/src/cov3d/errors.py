"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, anything else exits 3.
"""


class Cov3dError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(Cov3dError):
    """Invalid configuration, parameters, or option combinations."""


class DataError(Cov3dError):
    """Malformed, inconsistent, or missing data: files, layouts, shapes."""


class StateError(Cov3dError):
    """Operation invoked in the wrong order (e.g. backward before forward)."""


class TrainingError(Cov3dError):
    """Training aborted, e.g. a non-finite gradient."""
