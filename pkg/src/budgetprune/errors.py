"""Exception hierarchy. CLI exit codes are keyed on these classes."""


class BudgetPruneError(Exception):
    """Base class for all package errors."""


class ShapeError(BudgetPruneError, ValueError):
    """Operand dimensions are incompatible."""


class InputError(BudgetPruneError, ValueError):
    """Input values are outside their valid domain (e.g. labels out of range)."""


class UsageError(BudgetPruneError, ValueError):
    """An API or command was called in an unsupported way."""


class FormatError(BudgetPruneError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class NonFiniteError(BudgetPruneError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or gradient."""


class DivergenceError(BudgetPruneError, RuntimeError):
    """Training produced a non-finite loss."""
