"""Exception types shared across the toolkit.

Plain argument mistakes (wrong shapes, out-of-range scalars) raise ValueError;
the classes below mark conditions that callers are expected to catch and act
on: domain violations discovered at runtime, capacity caps, solver trouble,
composition failures, refinement misses, and oracle protocol faults.
"""


class SymabsError(Exception):
    """Base class for toolkit-specific errors."""


class DomainError(SymabsError):
    """A point lies outside the declared box domain."""


class CapacityError(SymabsError):
    """A configurable size cap (cells, rows, samples) would be exceeded."""


class SolverError(SymabsError):
    """The LP solver failed to converge or hit its iteration cap."""


class InfeasibleError(SolverError):
    """The LP constraint set is empty."""


class UnboundedError(SolverError):
    """The LP objective is unbounded over the feasible set."""


class CompositionError(SymabsError):
    """Interconnection or small-gain composition requirements are violated."""


class RefinementError(SymabsError):
    """No winning abstract state is related to the given concrete state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class OracleError(SymabsError):
    """An external oracle reported an error for a query."""


class ProtocolError(OracleError):
    """An external oracle reply was malformed, empty, or timed out."""


class ConfigError(SymabsError):
    """A pipeline configuration value is missing or out of range."""
