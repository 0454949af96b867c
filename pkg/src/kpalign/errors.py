"""
Exception hierarchy for kpalign.

Every exception carries the exit code the command-line surface returns for it:
2 for validation problems, 3 for numerical failures and 4 for I/O.
"""


class KpalignError(Exception):
    """Base class for all kpalign errors."""

    exit_code = 1


class ValidationError(KpalignError):
    """Inputs or configuration violate a documented invariant."""

    exit_code = 2


class InvalidArgumentError(ValidationError):
    """Argument has the wrong length, shape or a non-finite value."""


class GraphBuildError(ValidationError):
    """The correspondence graph cannot be built from the given matches."""


class ManifestError(ValidationError):
    """A collection manifest failed to parse or validate."""


class AlignmentFileError(ValidationError):
    """An alignment file failed to parse or validate."""


class UndefinedMetricError(ValidationError):
    """A metric has no points to be evaluated on."""


class SyntheticError(ValidationError):
    """A synthetic collection could not be generated."""


class NumericalFailureError(KpalignError):
    """
    Optimization or geometry produced a non-finite or undefined value.

    Args:
        message: Human readable description
        history: Loss history recorded before the failure (may be empty)
    """

    exit_code = 3

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class Sl3DomainError(NumericalFailureError):
    """Principal matrix logarithm is undefined for the input."""


class PointAtInfinityError(NumericalFailureError):
    """Perspective division by a homogeneous coordinate too close to zero."""


class KpalignIOError(KpalignError):
    """Reading or writing a file failed."""

    exit_code = 4

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path
