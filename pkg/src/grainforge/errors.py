"""Exception hierarchy.

UsageError subclasses signal bad input (CLI exit code 2); everything else
under NumericalError is a failure of a computation (exit code 3).
"""


class GrainforgeError(Exception):
    pass


class UsageError(GrainforgeError, ValueError):
    pass


class NumericalError(GrainforgeError, RuntimeError):
    pass


class InvalidArgument(UsageError):
    pass


class ThetaDegenerateError(UsageError):
    pass


class AlphaTooLargeError(UsageError):
    pass


class PreconditionError(UsageError):
    pass


class InvalidTestFunction(UsageError):
    pass


class ResolutionError(UsageError):
    pass


class DomainMismatchError(UsageError):
    pass


class DegenerateSampleError(NumericalError):
    def __init__(self, msg, cell=None):
        super().__init__(msg)
        self.cell = cell


class GeometryError(NumericalError):
    pass


class LoopThroughDefectError(NumericalError):
    pass


class TilingIncompatibleError(NumericalError):
    pass


class NoCleanSectionError(NumericalError):
    pass


class BudgetError(NumericalError):
    def __init__(self, msg, measured=None):
        super().__init__(msg)
        self.measured = measured


class ExtensionImpossibleError(NumericalError):
    pass


class SolverError(NumericalError):
    pass


class OptimizerFault(NumericalError):
    pass


class SpacingError(NumericalError):
    pass


class NotMicroRotationError(NumericalError):
    pass
