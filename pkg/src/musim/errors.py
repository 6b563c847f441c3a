"""Exception hierarchy shared across the package."""


class MusimError(Exception):
    """Base class for all errors raised by this package."""


class InputTooShort(MusimError):
    """Audio clip is shorter than one analysis window."""


class DomainError(MusimError):
    """Input falls outside the mathematical domain of an operation."""


class ManifestError(MusimError):
    """Corpus manifest or taxonomy file is malformed."""


class NoTempo(MusimError):
    """Tempo cannot be estimated (e.g. silent input)."""


class NoKey(MusimError):
    """Key cannot be estimated (e.g. silent or constant chroma)."""


class Unavailable(MusimError):
    """A track carries no data for the requested similarity dimension."""


class Exhausted(MusimError):
    """No anchor/positive pair exists for a dimension."""

    def __init__(self, dimension, message=None):
        self.dimension = dimension
        super().__init__(message or f"no similar pair available for dimension {dimension!r}")


class NoNegatives(MusimError):
    """Candidate list for negative mining is empty."""


class BatchError(MusimError):
    """Batch construction failed after exhausting its retry budget."""


class ShapeError(MusimError):
    """Array shape or model configuration mismatch."""


class StateError(MusimError):
    """Operation invoked in an invalid state (e.g. backward before forward)."""


class NumericsError(MusimError):
    """Non-finite values encountered during training."""


class EvalError(MusimError):
    """Evaluation input is empty or references unknown tracks."""
