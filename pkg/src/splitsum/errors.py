"""Shared exception types."""


class HdrError(Exception):
    """Base class for Radiance HDR file problems."""


class HdrHeaderError(HdrError):
    """Header is missing, malformed, or declares an unknown format."""


class HdrOrientationError(HdrError):
    """Resolution line uses an orientation other than `-Y h +X w`."""


class HdrTruncatedError(HdrError):
    """Pixel data ends before the declared resolution is filled."""


class ObjParseError(Exception):
    """OBJ file could not be parsed; message carries the line number."""


class DegenerateEstimatorError(Exception):
    """A ratio estimator's denominator vanished (no usable samples)."""


class DivergenceError(Exception):
    """Training produced a non-finite loss or parameter."""
