"""Exception types raised across the package."""


class FFNFusionError(Exception):
    """Base class for every error raised by ffnfusion."""


class InvalidArgumentError(FFNFusionError, ValueError):
    pass


class InvalidPlanError(FFNFusionError, ValueError):
    pass


class DegenerateScaleError(FFNFusionError, ValueError):
    """A folded norm scale would need to divide by a zero target channel."""


class CorruptCheckpointError(FFNFusionError):
    pass


class CorruptCalibrationError(FFNFusionError):
    pass
