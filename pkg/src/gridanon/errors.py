"""Exception hierarchy shared by all gridanon modules."""


class GridAnonError(Exception):
    """Base class for all domain errors raised by this package."""


class DataFormatError(GridAnonError):
    """A file or record does not conform to the expected format."""


class TopologyError(GridAnonError):
    """A network violates structural requirements (radiality, references)."""


class InfeasibleError(GridAnonError):
    """An optimisation problem has no feasible solution."""


class ConvergenceError(GridAnonError):
    """An iterative numerical method failed to converge."""
