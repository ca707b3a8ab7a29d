"""Exception hierarchy.

Every numerical failure raised by the library derives from NetlodError so
the CLI can map it to a nonzero exit code with context intact.
"""


class NetlodError(Exception):
    """Base class for all library errors."""


class NetworkValidationError(NetlodError):
    """A spatial network violates a structural invariant."""


class GenerationError(NetlodError):
    """Fiber network generation could not produce a usable network."""


class MeshError(NetlodError):
    """Invalid coarse mesh parameters or point outside the domain."""


class InterpolationError(NetlodError):
    """Dual-basis construction failed (typically a degenerate element)."""


class SolverError(NetlodError):
    """A linear solve, saddle solve or eigenvalue solve failed."""


class DisconnectedRegionError(SolverError):
    """The operator pencil has a (near-)zero second eigenvalue, i.e. the
    underlying subgraph is disconnected within tolerance."""
