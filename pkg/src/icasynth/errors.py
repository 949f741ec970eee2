"""Exception hierarchy shared by all icasynth modules.

Validation-type errors (bad inputs, bad files, misaligned datasets) map to
CLI exit code 1; numeric/runtime errors map to exit code 2.
"""


class IcasynthError(Exception):
    """Base class for all package errors."""


class ValidationError(IcasynthError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A file could not be parsed; message carries line/byte position."""


class AlignmentError(ValidationError):
    """Subject ids or labels do not line up across files/modalities."""


class StratificationError(ValidationError):
    """A class is absent from a split that requires both classes."""


class NumericError(IcasynthError, RuntimeError):
    """A numeric routine failed (non-convergence, degenerate values)."""


class RankDeficiencyError(NumericError):
    """Requested more components than the data numerically supports."""
