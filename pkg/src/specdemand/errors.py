class SpecDemandError(Exception):
    """Base class for package errors."""


class DataError(SpecDemandError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class InvariantError(SpecDemandError):
    """A structural invariant checked during a run did not hold."""


class DivergenceError(SpecDemandError, FloatingPointError):
    """Training produced a non-finite loss or activation."""
