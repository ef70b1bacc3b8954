"""Exception hierarchy shared by all modules."""


class DvaCovError(Exception):
    """Base class for errors raised by this package."""


class DomainError(DvaCovError, ValueError):
    """An argument lies outside the domain of the operation."""


class DimensionError(DvaCovError, ValueError):
    """Array shapes or model dimensions are inconsistent."""


class InsufficientDataError(DvaCovError, ValueError):
    """Too few observations for the requested estimate."""


class DataError(DvaCovError, ValueError):
    """Input data is malformed (non-finite values, bad CSV rows, ...)."""


class DegeneracyError(DvaCovError, ValueError):
    """A variance that must be positive is zero (or numerically zero)."""


class CollinearityError(DvaCovError, ValueError):
    """Regressors are rank deficient."""


class RankDeficiencyError(DvaCovError, ValueError):
    """Factor directions are not identifiable."""


class ConditioningError(DvaCovError, ArithmeticError):
    """A matrix is singular, indefinite or too badly conditioned to solve with."""


class ConstraintError(DvaCovError, ValueError):
    """Equality constraints are inconsistent or degenerate."""
