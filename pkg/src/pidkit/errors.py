"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: format/domain problems exit 2,
numeric/convergence problems exit 3, capability limits exit 4.
"""


class PidkitError(Exception):
    """Base class for all toolkit errors."""


class DomainError(PidkitError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(PidkitError, ValueError):
    """A file, record, or manifest violates the wire format."""


class NumericError(PidkitError, ArithmeticError):
    """A computation produced non-finite values or diverged."""


class InfeasibilityError(PidkitError):
    """Scaling targets admit no coupling (inconsistent marginal masses)."""


class CapabilityError(PidkitError):
    """The requested computation exceeds a documented size limit."""


class InternalConsistencyError(PidkitError):
    """An algebraic identity that must hold by construction was violated."""


class DegenerateSpectrumError(DomainError):
    """Total information is zero, so shares are undefined."""


class UndefinedCorrelationError(DomainError):
    """Rank correlation is undefined (a constant input)."""
