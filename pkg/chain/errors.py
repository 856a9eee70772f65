"""
Exception hierarchy for the chain toolkit.
"""
from typing import Any, List, Optional, Tuple


class ChainError(Exception):
    """Base class for every error raised by the chain package."""


class NumericDomainError(ChainError):
    """A potential or forcing evaluation produced a non-finite value."""


class PreconditionError(ChainError):
    """An argument or precondition of an operation was violated."""


class UnsupportedModeError(ChainError):
    """The operation does not support the given forcing kind (DC/AC)."""


class IntegrationBlowupError(ChainError):
    """The integrated state became non-finite."""

    def __init__(self, message: str, last_good_time: float):
        super().__init__(message)
        self.last_good_time = last_good_time


class TwistViolationError(ChainError):
    """The twist condition -V12 >= delta failed somewhere."""

    def __init__(self, message: str, worst_point: Tuple[float, float], value: float):
        super().__init__(message)
        self.worst_point = worst_point
        self.value = value


class DegreeOverflowError(ChainError):
    """A run of zero sites reached the edge of the scanned window."""


class AuditFailure(ChainError):
    """The zero-balance equation did not close."""

    def __init__(self, message: str, residual: int, events: Optional[List[Any]] = None):
        super().__init__(message)
        self.residual = residual
        self.events = events or []


class ConstructionError(ChainError):
    """An ordered invariant ensemble failed its orderedness check."""

    def __init__(self, message: str, member: Any = None, report: Any = None):
        super().__init__(message)
        self.member = member
        self.report = report


class NotSlidingError(ChainError):
    """A modulation table is not single-valued within tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConfigError(ChainError):
    """Run configuration failed validation."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key
