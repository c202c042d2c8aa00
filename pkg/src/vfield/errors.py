"""Exception and warning types shared across the package."""


class VfieldError(Exception):
    """Base class for all package-specific errors."""


class InvalidStateError(VfieldError):
    """A vector field was evaluated at a nonfinite state."""


class DivergenceError(VfieldError):
    """Numerical integration blew up (nonfinite or runaway state)."""

    def __init__(self, message, *, step=None, trajectory=None, time=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory
        self.time = time


class SolverDivergenceError(VfieldError):
    """An optimizer produced a nonfinite loss."""

    def __init__(self, message, *, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataShapeError(VfieldError):
    """Arrays have incompatible or invalid shapes/values."""


class NonUniformGridError(VfieldError):
    """Operation requires a uniformly spaced time grid."""


class ConfigError(VfieldError):
    """Invalid configuration value; carries a dotted field path when known."""

    def __init__(self, message, *, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class UnsupportedModelError(VfieldError):
    """Model family not supported by the requested algorithm."""


class UnrepresentableTermError(VfieldError):
    """A true vector-field term is missing from the chosen dictionary."""


class RankDeficientDesignWarning(UserWarning):
    """Least-squares design matrix was rank deficient; minimum-norm solution used."""
