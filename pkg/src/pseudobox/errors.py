"""Exception types raised across the package."""


class PseudoBoxError(Exception):
    """Base class for every error raised by pseudobox."""


class NonPositiveDepthError(PseudoBoxError, ValueError):
    """A projected point lies behind or on the camera plane."""


class EmptyInputError(PseudoBoxError, ValueError):
    pass


class DegenerateInputError(PseudoBoxError, ValueError):
    """Too few effective points, or all points collinear.

    ``fallback`` optionally carries a usable substitute result (for example an
    axis-aligned box) so callers can continue with a flagged value.
    """

    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class EmptyCloudError(PseudoBoxError, ValueError):
    pass


class TooFewPointsError(PseudoBoxError, ValueError):
    pass


class NoClusterAboveMinimumError(PseudoBoxError, ValueError):
    pass


class AllStartsFailedError(PseudoBoxError, RuntimeError):
    pass


class SceneMismatchError(PseudoBoxError, ValueError):
    pass


class PlacementFailureError(PseudoBoxError, RuntimeError):
    pass


class FormatError(PseudoBoxError, ValueError):
    """Malformed input file; the message names the file and position."""

    def __init__(self, path, position, detail):
        super().__init__(f"{path}:{position}: {detail}")
        self.path = str(path)
        self.position = position
        self.detail = detail


class MalformedCalibError(FormatError):
    pass


class MalformedLabelError(FormatError):
    pass


class TruncatedBinaryError(FormatError):
    pass
