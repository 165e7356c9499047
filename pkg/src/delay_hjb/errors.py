"""Exception hierarchy for delay_hjb.

All errors raised deliberately by the library derive from :class:`DelayHJBError`
so callers (and the CLI) can distinguish configuration problems from numerical
failures.
"""


class DelayHJBError(Exception):
    """Base class for all delay_hjb errors."""


class InvalidArgumentError(DelayHJBError, ValueError):
    """An argument violates a documented precondition (shapes, ranges, grids)."""


class PreconditionError(DelayHJBError):
    """A structural precondition failed a runtime spot-probe.

    Carries an optional ``witness`` describing the probe input that
    demonstrated the violation.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class NumericalError(DelayHJBError):
    """A numerical routine produced non-finite values or failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its budget without reaching tolerance."""


class ConfigurationError(DelayHJBError):
    """A run configuration is inconsistent or insufficient for the request."""
