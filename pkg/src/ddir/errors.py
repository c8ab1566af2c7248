"""Exception types raised across the package."""


class DDIRError(Exception):
    """Base class for all package errors."""


class ShapeError(DDIRError, ValueError):
    pass


class InvalidPoint(DDIRError, ValueError):
    pass


class LabelOutOfRange(DDIRError, ValueError):
    pass


class UnsupportedOp(DDIRError, KeyError):
    pass


class NonScalarLoss(DDIRError, ValueError):
    pass


class ZeroVariance(DDIRError, ValueError):
    pass


class NonPositivePrior(DDIRError, ValueError):
    pass


class EmptyInput(DDIRError, ValueError):
    pass


class EmptyRegion(DDIRError, ValueError):
    pass


class EmptyDataset(DDIRError, ValueError):
    pass


class ConfigError(DDIRError, ValueError):
    pass


class NonFiniteLoss(DDIRError, FloatingPointError):
    """Optimisation produced a NaN/inf loss. ``trace`` holds the losses so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
