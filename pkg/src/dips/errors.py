"""Exception types raised across the package."""


class DipsError(Exception):
    pass


class InvalidInputError(DipsError, ValueError):
    pass


class InvalidParameterError(DipsError, ValueError):
    pass


class ConfigurationError(DipsError):
    pass


class DegenerateInputError(DipsError, ValueError):
    """Input carries no usable contrast (e.g. a constant attention map)."""


class CheckpointError(DipsError):
    pass


class UndefinedLossError(DipsError, ValueError):
    pass


class TrainingAbortedError(DipsError, RuntimeError):
    """A loss term went non-finite; ``term`` names the offender."""

    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f"non-finite loss term: {term}")
