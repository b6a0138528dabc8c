"""Exception types shared across the package."""


class MmlipError(Exception):
    """Base class of every error raised on purpose by this package."""


class InvalidInputError(MmlipError, ValueError):
    """Raised for non-finite entries, negative constants or malformed arguments."""


class ShapeError(MmlipError, ValueError):
    """Raised when array dimensions do not line up."""


class DegenerateInputError(MmlipError, ValueError):
    """Raised when an input makes an operation undefined (e.g. normalizing a zero vector)."""


class UnsupportedConfigurationError(MmlipError, ValueError):
    """Raised when an operation is asked for a configuration it does not cover."""


class DegenerateDomainError(MmlipError, ValueError):
    """Raised when a Lipschitz estimate has no valid sample pair to work with."""


class NonFiniteOutputError(MmlipError, ArithmeticError):
    """Raised when a sampled function returns NaN or inf.

    The offending input is kept on ``sample`` for inspection.
    """

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class TrainingDivergenceError(MmlipError, ArithmeticError):
    """Raised when gradients or losses stop being finite during training."""


class InvalidSpecError(MmlipError, ValueError):
    """Raised for an unusable dataset or fault specification."""
