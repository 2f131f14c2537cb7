"""
Exception hierarchy for the noise-space sampling toolkit.

Library code raises these; the CLI maps them to exit codes.
"""

from typing import Any, Optional, Sequence


class NoiseSpaceError(Exception):
    """Base class for every error raised by the toolkit."""
    pass


class ContractViolationError(NoiseSpaceError, ValueError):
    """Raised when inputs break a documented precondition (dimensions, ranges)."""
    pass


class DivergenceError(NoiseSpaceError):
    """
    Raised when an iterate, loss or gradient becomes non-finite.

    ``evaluated`` is True when the failing step already spent its gradient evaluation.
    """

    def __init__(self, message: str, step: int, report: Optional[Any] = None, evaluated: bool = False):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.report = report
        self.evaluated = evaluated


class SupportError(NoiseSpaceError):
    """Raised when a density grid cannot be extended to cover the effective support."""
    pass


class IllPosedInstanceError(NoiseSpaceError):
    """Raised when the evidence of an instance is zero at grid resolution."""
    pass


class TheoremViolationError(NoiseSpaceError, AssertionError):
    """Raised when a proved inequality fails numerically; signals an implementation bug."""
    pass


class DegenerateSampleSetError(NoiseSpaceError):
    """Raised when a sample set has no spread (e.g. all samples identical)."""
    pass


class ConfigError(NoiseSpaceError):
    """Raised when an experiment configuration cannot be parsed or validated."""

    def __init__(self, message: str, keys: Sequence[str] = (), line: Optional[int] = None):
        super().__init__(message)
        self.keys = tuple(keys)
        self.line = line
