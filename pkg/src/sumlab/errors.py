"""Exception hierarchy.

Two families: :class:`DataError` for inputs an estimator cannot work with
(the CLI maps these to exit code 2) and :class:`NumericalError` for solver
or series failures (exit code 3).
"""


class SumlabError(Exception):
    """Base class for all errors raised by sumlab."""


class DataError(SumlabError, ValueError):
    pass


class NumericalError(SumlabError, ArithmeticError):
    pass


class NonIdentifiable(DataError):
    pass


class DivisionUndefined(DataError):
    pass


class InsufficientData(DataError):
    pass


class InvalidGrid(DataError):
    pass


class EmptyTable(DataError):
    pass


class EmptySample(DataError):
    pass


class InvalidSamplingFraction(DataError):
    pass


class NonConvergentSeries(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class BoundarySolution(NumericalError):
    pass


class SingularInformation(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class NumericalUnderflow(NumericalError):
    pass


class AllReplicatesFailed(NumericalError):
    pass
