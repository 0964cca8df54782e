"""Exception hierarchy for the codec."""


class LinrError(Exception):
    """Base class for all codec errors."""


class EmptyCloudError(LinrError):
    """An operation received a point cloud with no points."""


class PyramidMismatchError(LinrError):
    """A coarse/fine level pair is not related by 2x downsampling."""


class InvalidOccupancyError(LinrError):
    """A child-occupancy mask is zero (every parent must have a child)."""


class ShapeError(LinrError):
    """Feature matrix shape or channel count does not match."""


class ScaleMismatchError(LinrError):
    """A pyramid's depth does not match the model's scale count."""


class MissingGroundTruthError(LinrError):
    """Training/encoding requested without ground-truth occupancy."""


class NumericError(LinrError):
    """Non-finite value where a finite one is required."""


class DecodeError(LinrError):
    """Bitstream is corrupt, truncated, or structurally inconsistent."""


class CountMismatchError(LinrError):
    """Transmitted parameter count does not match the model."""


class ParseError(LinrError):
    """A point-cloud file could not be parsed."""

    def __init__(self, message, path=None, location=None):
        if path is not None:
            message = f"{path}: {message}"
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class DepthError(LinrError):
    """Coordinates exceed the configured bit depth."""
