"""Exception types raised across the toolkit."""


class TofcalError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TofcalError, ValueError):
    pass


class EmptyCluster(TofcalError, ValueError):
    pass


class IncompleteCluster(TofcalError, ValueError):
    pass


class SortOrderError(TofcalError, ValueError):
    pass


class SaturatedChannel(TofcalError, ValueError):
    pass


class PositionUndefined(TofcalError, ValueError):
    pass


class EmptyCalibration(TofcalError, RuntimeError):
    pass


class SchemaError(TofcalError, ValueError):
    pass


class FitDiverged(TofcalError, RuntimeError):
    """Raised when an iterative fit does not converge.

    ``diagnostics`` carries the last parameter vector and iteration count.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FitDegenerate(TofcalError, ValueError):
    pass


class FormatError(TofcalError, ValueError):
    """Malformed or version-incompatible artifact file."""
