"""Exception types raised by cmpdak."""


class CmpdakError(Exception):
    """Base class for all package errors."""


class DomainError(CmpdakError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConvergenceError(CmpdakError, RuntimeError):
    """A series or root search failed to converge."""


class InsufficientDataError(CmpdakError, ValueError):
    """The sample is too small for the requested operation."""
