"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class ArtifactError(Exception):
    """Base class for every error raised by the package."""


class DomainError(ArtifactError, ValueError):
    """A point lies outside the validity domain of a chart."""


class ArgumentError(ArtifactError, ValueError):
    """An argument is outside its documented range."""


class PreconditionError(ArtifactError, ValueError):
    """A documented precondition of an operation is violated."""


class DegeneracyError(ArtifactError):
    """The induced metric is not positive definite at some node.

    Attributes
    ----------
    node : tuple of int
        Grid index of the first offending node.
    """

    def __init__(self, message: str, node: tuple[int, ...] | None = None):
        super().__init__(message)
        self.node = node


class InstabilityError(ArtifactError):
    """An explicit step blew up (CFL violation)."""


class GaugeError(ArtifactError):
    """A reparametrization map is not invertible on the grid."""


class GraphError(ArtifactError):
    """Extraction of a local graph representation failed."""


class MultiSheetError(GraphError):
    """Two sheets project onto overlapping disks."""


class ResolutionError(GraphError):
    """The grid is too coarse to sample the requested disk."""


class ConstructionError(ArtifactError):
    """A cutoff profile failed its sampled bounds."""


class ParseError(ArtifactError, ValueError):
    """A scenario file could not be parsed.

    Attributes
    ----------
    line : int or None
        One-based line number of the offending entry.
    """

    def __init__(self, message: str, line: int | None = None):
        text = f"line {line}: {message}" if line is not None else message
        super().__init__(text)
        self.line = line
