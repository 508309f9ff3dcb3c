"""Exception types shared across the package."""


class DecollabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DecollabError, ValueError):
    """A task, config or parameter block is malformed or inconsistent."""


class ValidationError(DecollabError, ValueError):
    """An input value violates a documented precondition."""


class UsageError(DecollabError, TypeError):
    """An operation was called with the wrong arity or in the wrong state."""


class NumericFault(DecollabError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class CapExceeded(DecollabError):
    """An exhaustive enumeration would exceed its configured size cap."""

    def __init__(self, estimate: int, cap: int):
        super().__init__(f"enumeration needs ~{estimate} trajectories, cap is {cap}")
        self.estimate = estimate
        self.cap = cap


class InvariantViolation(DecollabError, AssertionError):
    """A checked invariant did not hold."""


class ChecksumError(DecollabError):
    """A checkpoint payload does not match its recorded checksum."""
