"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised on tensor shape mismatches; the message names the offending dimension."""


class GraphError(RuntimeError):
    """Raised on invalid autodiff usage (e.g. backward from a non-scalar)."""


class ArchError(ValueError):
    """Raised on invalid architecture descriptors or search spaces."""


class RemapError(ValueError):
    """Raised when a parameter remapping request is ill-formed."""


class CheckpointError(RuntimeError):
    """Raised on unreadable, truncated, or version-mismatched checkpoints."""


class SearchDivergence(RuntimeError):
    """Raised when a training/search loss becomes non-finite.

    Carries the partial trace (or curve) collected so far in ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
