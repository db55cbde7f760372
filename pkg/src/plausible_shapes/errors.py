"""Exception types shared across the package."""


class PlausibleShapesError(Exception):
    pass


class EmptyShape(PlausibleShapesError, ValueError):
    """A grid or cloud has no occupied voxel where one is required."""


class MalformedHeader(PlausibleShapesError, ValueError):
    pass


class TruncatedData(PlausibleShapesError, ValueError):
    pass


class NonCubicDims(PlausibleShapesError, ValueError):
    pass


class NonFiniteLoss(PlausibleShapesError, FloatingPointError):
    """Training produced a NaN/inf loss.

    ``batch_index`` names the offending batch (or -1 when unknown).
    """

    def __init__(self, message, batch_index=-1):
        super().__init__(message)
        self.batch_index = batch_index


class ConfigError(PlausibleShapesError, ValueError):
    """Invalid configuration key or value."""
