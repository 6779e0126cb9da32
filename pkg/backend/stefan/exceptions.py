"""
Error types raised by the solvers and the experiment layer.

Management commands map them to exit codes: ConfigurationError -> 2,
NumericalError -> 3.
"""


class StefanError(Exception):
    """Base class for every error raised by the stefan app."""


class ConfigurationError(StefanError, ValueError):
    """Invalid parameters, schema violations or mismatched grids."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DomainError(StefanError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class UndefinedDistanceError(StefanError, ValueError):
    """Hausdorff distance requested between two empty sets."""


class NumericalError(StefanError):
    """A solver could not produce a trustworthy result."""


class LinearSolveError(NumericalError):
    def __init__(self, message, step=None, info=None, residual=None):
        super().__init__(message)
        self.step = step
        self.info = info
        self.residual = residual


class CoefficientBandError(NumericalError):
    """A diffusion coefficient left the admissible band [lambda^alpha, k*]."""

    def __init__(self, message, low=None, high=None):
        super().__init__(message)
        self.low = low
        self.high = high


class PicardNonConvergence(NumericalError):
    def __init__(self, message, residual, history):
        super().__init__(message)
        self.residual = residual
        self.history = history
