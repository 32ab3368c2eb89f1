"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Everything else is an ordinary crash.
"""


class FTError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FTError):
    """Invalid configuration file, key, value, or combination."""


class DataError(FTError):
    """Unreadable, malformed, or inconsistent dataset input."""


class ProtocolError(DataError):
    """Episode sampling cannot satisfy the K-way N-shot protocol."""


class NumericalError(FTError):
    """A numerical procedure failed (divergence, no convergence)."""


class SingularMatrixError(NumericalError):
    """Linear system with a pivot below the singularity threshold."""


class ContractError(FTError):
    """An operation was called outside its documented contract."""


class InvalidDimensionError(ContractError):
    """Dimension argument outside the supported range."""


class DegenerateGraphError(FTError):
    """Affinity graph cannot be built (e.g. all points coincide)."""


class IsolatedNodeError(DegenerateGraphError):
    """A graph node has zero degree; carries the node index."""

    def __init__(self, node: int):
        super().__init__(f"graph node {node} is isolated (zero degree)")
        self.node = node
