"""Exception types shared across the package.

All errors raised by dynsplat code derive from DynsplatError so callers can
catch the whole family at API boundaries (the CLI maps them to exit codes).
"""


class DynsplatError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DynsplatError):
    """Array argument has the wrong shape or an inconsistent leading dim."""


class BehindCamera(DynsplatError):
    """Point projection requested for a point at or behind the near plane."""


class DegenerateRotation(DynsplatError):
    """6D rotation input cannot be orthonormalized (zero or collinear axes)."""


class NonScalarLoss(DynsplatError):
    """backward() called on a node whose value is not a scalar."""


class NonFiniteValue(DynsplatError):
    """A NaN or Inf appeared in a forward value during differentiation."""


class DegenerateSamples(DynsplatError):
    """Too few or rank-deficient samples for a least-squares fit."""


class DegenerateConfiguration(DynsplatError):
    """Point configuration has no usable correspondences for alignment."""


class EmptyValidSet(DynsplatError):
    """An operation that needs at least one valid element received none."""


class EmptyMask(DynsplatError):
    """A masked reduction received an all-false mask."""


class InvalidSpec(DynsplatError):
    """A scene or config description is internally inconsistent."""
