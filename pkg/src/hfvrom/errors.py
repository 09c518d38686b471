"""Exception hierarchy shared by every stage of the pipeline."""


class HfvError(Exception):
    """Base class for all errors raised by :mod:`hfvrom`."""


class InvalidArgument(HfvError, ValueError):
    pass


class MalformedMesh(HfvError):
    pass


class DegenerateElement(HfvError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class NumericalBlowup(HfvError):
    """Non-finite values appeared during time stepping."""

    def __init__(self, message, cell=None, time=None):
        super().__init__(message)
        self.cell = cell
        self.time = time


class SolverFailure(HfvError):
    pass


class DegenerateSnapshots(HfvError):
    pass


class IllConditionedBasis(HfvError):
    pass


class ZeroReference(HfvError, ZeroDivisionError):
    pass


class ConfigError(HfvError):
    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
