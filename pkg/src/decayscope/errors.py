"""Exception hierarchy."""


class DecayScopeError(Exception):
    """Base class for all errors raised by decayscope."""


class InputValidationError(DecayScopeError, ValueError):
    """Bad coordinates, non-finite values, mismatched array lengths."""


class ConfigurationError(DecayScopeError, ValueError):
    """Invalid configuration value or impossible combination of options."""


class SchemaError(DecayScopeError, ValueError):
    """Input file does not follow the expected column layout."""


class DegenerateInputError(DecayScopeError, ValueError):
    """Input is valid but carries no information for the requested fit."""


class SingularFitError(DecayScopeError, ArithmeticError):
    """Local design matrix is rank deficient.

    Attributes
    ----------
    d0 : float
        Evaluation point (km) where the fit failed.
    index : int or None
        Position of ``d0`` in the evaluation grid, when known.
    """

    def __init__(self, d0, index=None, message=None):
        self.d0 = float(d0)
        self.index = index
        if message is None:
            where = f" (grid index {index})" if index is not None else ""
            message = f"singular local design at d0={self.d0:g} km{where}"
        super().__init__(message)
