"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation and format
problems exit with 2, a numeric abort during training exits with 3,
anything else unexpected exits with 1.
"""


class RangesegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RangesegError):
    """Invalid configuration value or inconsistent option combination."""


class FormatError(RangesegError):
    """Malformed input file (scan, label, pose, calibration, container)."""


class GeometryError(RangesegError):
    """Degenerate geometric input, e.g. a zero-range point."""


class InvalidPoseError(RangesegError):
    """A pose matrix that is not a rigid transform."""


class ShapeError(RangesegError):
    """Array shape mismatch between two pipeline stages."""


class SequenceError(RangesegError):
    """Frames presented out of order, or state reused across sequences."""


class GraphError(RangesegError):
    """Autodiff misuse: backward without a recorded graph, non-scalar loss."""


class MetricError(RangesegError):
    """Metric accumulation with invalid labels or undefined reduction."""


class NumericAbort(RangesegError):
    """Training produced a non-finite loss; carries diagnostic context."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
