# SPDX-License-Identifier: Apache-2.0
"""Exceptions for lobstefan.

Every class carries the CLI exit code of its family.
"""

class LobStefanError(Exception):
    """Base exception for lobstefan errors."""
    exit_code = 4

class ConfigError(LobStefanError):
    """Raised when a run configuration is missing or invalid."""
    exit_code = 2

class InvalidParameterError(ConfigError):
    """Raised when a model or utility parameter violates its invariant."""
    pass

class DataError(LobStefanError):
    """Raised when an order-book dataset cannot be read or is inconsistent."""
    exit_code = 3

class ParseError(DataError):
    """Raised when a CSV cell cannot be parsed."""
    pass

class ShapeMismatchError(DataError):
    """Raised when matrix shapes disagree."""
    pass

class NegativeVolumeError(DataError):
    """Raised when an order-book matrix holds a negative volume."""
    pass

class NumericalError(LobStefanError):
    """Base class for failures of a numerical routine."""
    exit_code = 4

class DomainError(NumericalError):
    """Raised when a function is evaluated outside its domain."""
    pass

class CFLViolationError(NumericalError):
    """Raised when the explicit scheme would be unstable on the grid."""
    pass

class SingularMatrixError(NumericalError):
    """Raised when the normal equations are degenerate."""
    pass

class ConvergenceError(NumericalError):
    """Raised when no optimizer run produced a usable result."""
    pass

class QuadratureError(NumericalError):
    """Raised when adaptive quadrature misses its tolerance."""
    pass

class InfeasibleBudgetError(NumericalError):
    """Raised when consumption is not positive."""
    pass

class UtilityInvariantError(NumericalError):
    """Raised when a utility is not increasing and concave at a queried point."""
    pass

class BoundaryBlowUp(NumericalError):
    """Raised by a single step when the boundary velocity reaches the threshold."""

    def __init__(self, drift, threshold):
        super().__init__(f'boundary velocity {drift:.6g} reached threshold {threshold:.6g}')
        self.drift = drift
        self.threshold = threshold
