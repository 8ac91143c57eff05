"""Error types shared across the package.

Everything derives from MassflowError so callers can catch the whole family;
the subclasses distinguish shape bugs (programming errors) from violated
numeric contracts (bad inputs) and from iterative procedures that ran out of
budget.
"""

from __future__ import annotations


class MassflowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MassflowError, ValueError):
    """Operands have incompatible shapes; message names the primitive and shapes."""


class ContractError(MassflowError, ValueError):
    """A documented precondition was violated (wrong domain, bad config, ...)."""


class DomainError(ContractError):
    """A numeric input lies outside the mathematical domain of an operation."""


class ConvergenceError(MassflowError, RuntimeError):
    """An iterative procedure exhausted its iteration budget before converging."""


class DivergenceError(MassflowError, RuntimeError):
    """Training produced NaN/Inf; message names where it was first detected."""
