"""Exception hierarchy used across the package.

Every failure mode that callers are expected to handle gets its own type so
that scripts can map them to exit codes (see ``covdiff.cli``).
"""


class CovdiffError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CovdiffError):
    """Shapes of the operands are inconsistent (non-square, rank mismatch, ...)."""


class ValidationError(CovdiffError):
    """An input value violates a documented precondition."""


class DivisibilityError(ValidationError):
    """A partition count does not divide the sample count."""


class SizeError(ValidationError):
    """A count parameter is out of range (e.g. more partitions than samples)."""


class DefinitenessError(CovdiffError):
    """A matrix required to be positive definite is not.

    ``pivot`` is the zero-based index of the Cholesky pivot that failed.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NumericalError(CovdiffError):
    """A numerical routine failed to converge or produced non-finite values."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContractError(CovdiffError):
    """Two values that must share provenance (same iterate, same data) do not."""


class FormatError(CovdiffError):
    """A serialized artifact has a malformed or unsupported header/payload."""


class DataError(CovdiffError):
    """A payload parsed correctly but contains invalid data (NaN, Inf)."""


class CalibrationError(CovdiffError):
    """Measured noise statistics cannot be turned into a valid schedule."""


class ConfigurationError(CovdiffError):
    """A run configuration is internally inconsistent or incomplete."""


class TrainingError(CovdiffError):
    """Training diverged.  ``checkpoint`` holds the last finite parameters."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MissingArtifactError(CovdiffError):
    """A required input file (weights, schedule, cube) does not exist."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
