"""Exception hierarchy for the workflow engine.

Every error carries a ``category`` used by metrics to attribute failures:
``framework`` for engine/config/tool-execution faults, ``model`` for
misbehaving model output (unknown tools, malformed finals). The split feeds
the failure-attribution counters and must stay stable.
"""

from __future__ import annotations


class DetflowError(Exception):
    """Base class for all engine errors."""

    category = "framework"


# --- graph construction / validation ---------------------------------------


class DuplicateNodeId(DetflowError):
    pass


class UnknownNode(DetflowError):
    pass


class SelfLoop(DetflowError):
    pass


class DuplicateEdgeId(DetflowError):
    pass


class SealedGraph(DetflowError):
    """Raised when mutating a graph after successful validation."""


class InvalidNodeSpec(DetflowError):
    pass


class InvalidEdgeSpec(DetflowError):
    """Malformed edge declaration (e.g. a field map reusing a source field)."""


class CycleError(DetflowError):
    """Raised by topological ordering when the graph contains a cycle."""

    def __init__(self, nodes: tuple[str, ...]):
        super().__init__(f"cycle through nodes: {', '.join(nodes)}")
        self.nodes = nodes


class NonConvexSubset(DetflowError):
    """Subset chosen for encapsulation is not convex (or not connected)."""


class EmptySubset(DetflowError):
    pass


class ValidationFailed(DetflowError):
    """Graph failed validation; carries the full report."""

    def __init__(self, report):
        lines = "; ".join(str(f) for f in report.errors())
        super().__init__(f"validation failed: {lines}")
        self.report = report


# --- values / serialization -------------------------------------------------


class ValueError_(DetflowError):
    """Malformed Value construction (bad tag, out-of-range int, ...)."""


class CanonicalDecodeError(DetflowError):
    pass


class PlainDecodeError(DetflowError):
    """Schema-directed decode of plain JSON failed."""

    def __init__(self, path: str, detail: str):
        super().__init__(f"at {path or '<root>'}: {detail}")
        self.path = path
        self.detail = detail


# --- predicate language -----------------------------------------------------


class LexError(DetflowError):
    def __init__(self, offset: int, detail: str):
        super().__init__(f"lex error at offset {offset}: {detail}")
        self.offset = offset


class ParseError(DetflowError):
    def __init__(self, offset: int, detail: str):
        super().__init__(f"parse error at offset {offset}: {detail}")
        self.offset = offset


class PredicateTypeError(DetflowError):
    def __init__(self, detail: str, expected: str = "", found: str = ""):
        super().__init__(detail)
        self.expected = expected
        self.found = found


class UnknownStateKey(PredicateTypeError):
    def __init__(self, key: str):
        super().__init__(f"unknown state key: {key!r}")
        self.key = key


class EvalError(DetflowError):
    """Runtime predicate failure. ``code`` is one of
    division-by-zero | nan-comparison | missing-key | int-overflow."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


# --- memory -------------------------------------------------------------


class ScratchClosed(DetflowError):
    pass


class ScopeViolation(DetflowError):
    def __init__(self, key: str):
        super().__init__(f"state key {key!r} is outside the declared read scope")
        self.key = key


class MissingKey(DetflowError):
    def __init__(self, key: str):
        super().__init__(f"state key {key!r} is not present")
        self.key = key


class SchemaViolation(DetflowError):
    pass


class UnknownConnector(DetflowError):
    pass


class ConnectorError(DetflowError):
    pass


class PoolTimeout(DetflowError):
    pass


# --- runtime nodes ------------------------------------------------------


class ProviderError(DetflowError):
    """Transport failure or malformed payload from a model provider."""


class UnknownTool(DetflowError):
    pass


class DuplicateTool(DetflowError):
    pass


class ToolTimeout(DetflowError):
    pass


class ToolFailed(DetflowError):
    pass


class ToolOutputSchemaViolation(DetflowError):
    pass


class OutputSchemaViolation(DetflowError):
    """Model's final text did not parse/conform to the output schema."""

    category = "model"


class IterationLimitExceeded(DetflowError):
    category = "model"


class CancelledRun(DetflowError):
    pass


# --- engine ---------------------------------------------------------------


class ExecutionFailed(DetflowError):
    """A node failed terminally; carries the failing node and partial result."""

    def __init__(self, node_id: str, cause: BaseException, result=None):
        super().__init__(f"node {node_id!r} failed: {cause}")
        self.node_id = node_id
        self.cause = cause
        self.result = result
        if isinstance(cause, DetflowError):
            self.category = cause.category


class NoBranchTaken(DetflowError):
    def __init__(self, node_id: str):
        super().__init__(f"no guard matched at branch {node_id!r}")
        self.node_id = node_id


class AggregateUnsatisfiable(DetflowError):
    def __init__(self, node_id: str, detail: str):
        super().__init__(f"aggregate {node_id!r} unsatisfiable: {detail}")
        self.node_id = node_id


class StallError(DetflowError):
    def __init__(self, nodes: tuple[str, ...], watchdog_ms: int):
        super().__init__(
            f"no progress within {watchdog_ms} ms; in-flight nodes: "
            + (", ".join(nodes) or "<none>")
        )
        self.nodes = nodes


class InternalInvariantError(DetflowError):
    """A state the scheduler asserts unreachable for validated graphs."""


class CheckpointIncompatible(DetflowError):
    pass


class CheckpointCorrupt(DetflowError):
    pass


# --- documents / CLI ------------------------------------------------------


class ParseFailure(DetflowError):
    def __init__(self, detail: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"malformed document{where}: {detail}")
        self.line = line
