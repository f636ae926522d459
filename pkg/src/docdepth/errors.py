"""Exception types raised across the toolkit."""


class DocDepthError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(DocDepthError, ValueError):
    """Degenerate geometric input (zero-norm point, collinear plane samples...)."""


class ExtrapolationError(DocDepthError, ValueError):
    pass


class CorruptFileError(DocDepthError, ValueError):
    """A file on disk does not match its declared format."""


class InvalidRotationError(DocDepthError, ValueError):
    pass


class CalibrationError(DocDepthError, ValueError):
    """A calibration solver cannot observe part of the extrinsic."""


class NoGroundSeedsError(DocDepthError, RuntimeError):
    pass


class SelectionError(DocDepthError, ValueError):
    """No LiDAR frames qualify for a requested operation."""


class ConfigError(DocDepthError, ValueError):
    pass


class EvaluationError(DocDepthError, ValueError):
    pass
