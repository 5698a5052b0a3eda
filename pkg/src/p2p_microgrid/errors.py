"""Exception hierarchy for the simulator.

Every domain failure is a ValueError so callers that only know about bad
input keep working; the CLI maps ValidationFailedError to exit code 2 and
everything else to exit code 1.
"""

from collections.abc import Sequence

PathPart = str | int


def format_path(path: Sequence[PathPart]) -> str:
    """Render a field path as ``microgrids/0/graph/edges/2``."""
    return "/".join(str(part) for part in path) or "<root>"


class GridSimError(ValueError):
    """Base class for all simulator errors."""


class InvalidNodeError(GridSimError):
    """A node index is out of range or refers to a removed node."""

    def __init__(self, node: int, detail: str = "") -> None:
        self.node = node
        message = f"Invalid node {node}"
        super().__init__(f"{message}: {detail}" if detail else message)


class SelfLoopError(GridSimError):
    """An edge connects a node to itself."""

    def __init__(self, node: int) -> None:
        self.node = node
        super().__init__(f"Self-loop on node {node} is not allowed")


class EpsilonOutOfRangeError(GridSimError):
    """Consensus weight violates 0 < epsilon < 1/max_degree."""

    def __init__(self, epsilon: float, max_degree: int) -> None:
        self.epsilon = epsilon
        self.max_degree = max_degree
        bound = "inf" if max_degree == 0 else f"{1.0 / max_degree:.6g}"
        super().__init__(f"Epsilon {epsilon} must lie in (0, {bound})")


class LastNodeError(GridSimError):
    """Removing the node would leave the graph empty."""

    def __init__(self, node: int) -> None:
        self.node = node
        super().__init__(f"Cannot remove node {node}: it is the last live node")


class DimensionMismatchError(GridSimError):
    """A state vector does not match the live nodes of the graph."""


class NotConnectedError(GridSimError):
    """The communication graph over live agents is partitioned."""


class NonPositiveVoltageError(GridSimError):
    """A local voltage measurement is zero or negative."""


class InfeasibleError(GridSimError):
    """Demand cannot be met within the units' limits."""


class NoDroopResponseError(GridSimError):
    """There is an imbalance but no unit responds to frequency."""


class NotDispatchableError(GridSimError):
    """A DER without a cost curve was asked to take part in dispatch."""


class UnknownTargetError(GridSimError):
    """A fault event refers to an agent or link in the wrong state."""


class ValidationFailedError(GridSimError):
    """Scenario input failed validation; carries the offending field path."""

    def __init__(self, message: str, path: Sequence[PathPart] = ()) -> None:
        self.path = tuple(path)
        self.detail = message
        super().__init__(f"{format_path(self.path)}: {message}")


class ScenarioSyntaxError(ValidationFailedError):
    """Scenario text is not valid UTF-8 JSON."""


class SchemaViolationError(ValidationFailedError):
    """Scenario JSON does not match the schema or a structural invariant."""


class DanglingReferenceError(ValidationFailedError):
    """A cross-reference in the scenario does not resolve."""


class UnknownParameterError(ValidationFailedError):
    """A sweep parameter path does not exist in the scenario."""
