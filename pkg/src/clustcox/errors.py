"""Exception hierarchy.

Input problems derive from :class:`InputError`, numerical breakdowns from
:class:`NumericalError`; the CLI maps the two families to exit codes 2 and 3.
"""

from __future__ import annotations


class ClustCoxError(Exception):
    """Base class for every error raised by this package."""


class InputError(ClustCoxError, ValueError):
    """Data or configuration that violates a documented precondition."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(ClustCoxError, ArithmeticError):
    """A computation that cannot produce a meaningful number."""


# -- data validation ---------------------------------------------------------
class EmptyRecords(InputError):
    pass


class NonPositiveTime(InputError):
    pass


class BadEventFlag(InputError):
    pass


class RaggedCovariates(InputError):
    pass


class NoEvents(InputError):
    pass


class ConstantCovariates(InputError):
    pass


class TooFewClusters(InputError):
    pass


class SchemaError(InputError):
    """CSV header or field layout does not match ``cluster,time,event,z1..``."""


# -- fitting and variance ----------------------------------------------------
class SingularInformation(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class LeverageAtOne(NumericalError):
    pass


class ComplexSquareRoot(NumericalError):
    pass


class DegenerateDesign(NumericalError):
    pass


class NonPositiveVariance(NumericalError):
    pass


# -- inference and simulation ------------------------------------------------
class BadProbability(InputError):
    pass


class BadRate(InputError):
    pass


class NoRoot(InputError):
    pass


class InvalidScenario(InputError):
    pass


class TooFewReplications(NumericalError):
    pass


class GridParseError(InputError):
    def __init__(self, message: str, block: int | None = None, key: str | None = None) -> None:
        self.block = block
        self.key = key
        where = []
        if block is not None:
            where.append(f"block {block}")
        if key is not None:
            where.append(f"key '{key}'")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
