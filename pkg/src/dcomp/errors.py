"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new failure modes should
subclass one of the four base categories below rather than raising bare
ValueError/RuntimeError.
"""


class DcompError(Exception):
    """Base class for all package errors."""


class ConfigError(DcompError):
    """Invalid configuration value, unknown key, or inconsistent settings."""


class DataError(DcompError):
    """Missing, malformed, or out-of-contract input data."""


class NumericalError(DcompError):
    """NaN/Inf encountered, or an optimization failed to make progress."""


class ShapeError(DcompError):
    """Tensor shape mismatch; the message names both shapes."""

    def __init__(self, op: str, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class GeometryError(DataError):
    """Invalid geometric input (non-positive depth, bad rotation, ...)."""


class PoseEstimationError(DataError):
    """Pose recovery failed: degenerate geometry or too few correspondences."""


class FormatError(DataError):
    """A serialized artifact (checkpoint, feature file, PNG) is malformed."""
