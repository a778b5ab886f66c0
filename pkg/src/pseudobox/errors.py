"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
GateSkipped -> 3, degenerate-input errors -> 4.
"""

from __future__ import annotations


class PseudoboxError(Exception):
    """Base class for all package errors."""


class ConfigError(PseudoboxError):
    """Invalid or inconsistent configuration."""


class BehindCamera(PseudoboxError):
    """A point has non-positive depth in the camera frame."""


class NonPositiveDepth(PseudoboxError):
    """A depth value that must be positive is not."""


class InsufficientViews(PseudoboxError):
    """Fewer than two usable observations in distinct frames."""


class DegenerateGeometry(PseudoboxError):
    """Viewing rays are (near-)parallel or otherwise unusable."""


class CheiralityFailure(PseudoboxError):
    """Triangulated point lies behind (nearly) all observing cameras."""


class SingularNormalEquations(PseudoboxError):
    """Normal equations stayed singular after the damping retry cap."""


class DegenerateCluster(PseudoboxError):
    """Too few points, or points collinear in bird's-eye view."""


class InvalidBox(PseudoboxError):
    """A 3D box with non-positive size where a solid box is required."""


class GateSkipped(PseudoboxError):
    """Camera baseline too small for reconstruction.

    Carries the all-2D label set so callers can still persist one label
    per track.
    """

    def __init__(self, message: str, labels=None):
        super().__init__(message)
        self.labels = labels
