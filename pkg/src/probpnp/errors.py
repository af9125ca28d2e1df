"""Exception types shared across the toolkit.

All library errors derive from :class:`ProbPnpError` so callers can catch
everything domain-specific with a single except clause while still letting
programming errors (TypeError, etc.) propagate untouched.
"""

from __future__ import annotations


class ProbPnpError(Exception):
    """Base class for all toolkit errors."""


class CheiralityViolation(ProbPnpError):
    """A model point landed behind the camera (depth below the z floor)."""


class TooFewPoints(ProbPnpError):
    """An operation needs more correspondences than were supplied."""


class DegenerateConfiguration(ProbPnpError):
    """The 3D points do not span enough of space to initialize a pose."""


class NonFiniteCost(ProbPnpError):
    """A NaN or infinity appeared where a finite cost was required."""


class SingularInformation(ProbPnpError):
    """The Gauss-Newton information matrix has a (near-)null direction.

    Attributes
    ----------
    direction : numpy.ndarray or None
        Unit 6-vector spanning the offending tangent direction, when known.
    eigenvalue : float or None
        The eigenvalue that tripped the check.
    """

    def __init__(self, message, direction=None, eigenvalue=None):
        super().__init__(message)
        self.direction = direction
        self.eigenvalue = eigenvalue


class ImproperDensity(ProbPnpError):
    """Too little effective weight for the pose density to normalize."""


class EmptyMask(ProbPnpError):
    """A reduction over a mask was requested but the mask selects nothing."""


class InvalidSize(ProbPnpError):
    """A geometric size or raster dimension was zero or negative."""


class ParseError(ProbPnpError):
    """A text input could not be parsed.

    Attributes
    ----------
    line : int or None
        1-based line number of the offending input line, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedPly(ProbPnpError):
    """The PLY file is valid but outside the supported ASCII subset."""


class DimensionMismatch(ProbPnpError):
    """Two rasters or arrays that must agree in shape do not."""


class NoOverlap(ProbPnpError):
    """Two depth maps share no pixels with data in both."""


class EmptyUnion(ProbPnpError):
    """Neither of two renders produced any visible pixel."""


class ConfigError(ProbPnpError):
    """A configuration value is missing, malformed, or out of range."""
