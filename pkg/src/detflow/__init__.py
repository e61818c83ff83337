"""detflow: deterministic orchestration for multi-agent workflows.

Workflows are typed DAGs of agent, tool, and control nodes. The engine owns
all routing decisions (model output can never alter control flow), runs
independent nodes in parallel, and still produces bit-identical state and
traces for a given (graph, input, seed) regardless of worker count.
"""

from .errors import (
    AggregateUnsatisfiable,
    CancelledRun,
    CheckpointCorrupt,
    CheckpointIncompatible,
    CycleError,
    DetflowError,
    EvalError,
    ExecutionFailed,
    InternalInvariantError,
    IterationLimitExceeded,
    MissingKey,
    NoBranchTaken,
    OutputSchemaViolation,
    ParseFailure,
    SchemaViolation,
    ScopeViolation,
    StallError,
    ToolFailed,
    ToolTimeout,
    UnknownTool,
    ValidationFailed,
)
from .values import (
    BOOL,
    BYTES,
    FLOAT,
    INT,
    STRING,
    ListOf,
    Primitive,
    RecordOf,
    Schema,
    Value,
    canonical_bytes,
    canonical_digest,
    canonical_obj,
    format_float,
    from_plain,
    record_from_plain,
    record_of,
    to_plain,
    value_from_canonical_obj,
)
from .recovery import FailFast, RecoveryPolicy, Retry, retry_delay_ms
from .predicate import compile_guard, evaluate, parse_source, print_expr, typecheck
from .graph import (
    FIRST_AVAILABLE,
    REQUIRE_ALL,
    AgentSpec,
    AggregateSpec,
    BranchSpec,
    EdgeSpec,
    FanOutSpec,
    Guard,
    Node,
    SubgraphDef,
    SubgraphSpec,
    ToolSpec,
    TransformRegistry,
    ValidationReport,
    WorkflowGraph,
    encapsulate,
    inline,
    layer_assignment,
    topological_order,
    validate,
)
from .memory import (
    ConnectorHub,
    ConnectorSpec,
    ScratchSpace,
    StateEntry,
    StateSnapshot,
    StateStore,
    default_hub,
)
from .providers import (
    HttpProvider,
    MockProvider,
    Provider,
    ProviderRequest,
    ProviderResponse,
    ToolCallRequest,
    final,
    tool_call,
    tool_calls,
)
from .nodes import (
    AgentOutcome,
    ModelAnomaly,
    ToolRegistry,
    assemble_context,
    default_tool_registry,
    external_section,
    parse_structured_output,
    run_agent,
    run_tool,
)
from .engine import (
    BatchReport,
    Checkpoint,
    ExecutionConfig,
    ExecutionResult,
    ExecutionTrace,
    Metrics,
    NodeRun,
    TraceEvent,
    execute,
    resume,
    throughput_opm,
)
from .docio import (
    ToolBinding,
    WorkflowDocument,
    build_tool_registry,
    export_dot,
    load_state,
    load_transcript,
    load_workflow,
    save_state_file,
    save_transcript,
    save_workflow,
)

__version__ = "0.1.0"

__all__ = [
    "AgentOutcome",
    "AgentSpec",
    "AggregateSpec",
    "AggregateUnsatisfiable",
    "BOOL",
    "BYTES",
    "BatchReport",
    "BranchSpec",
    "CancelledRun",
    "Checkpoint",
    "CheckpointCorrupt",
    "CheckpointIncompatible",
    "ConnectorHub",
    "ConnectorSpec",
    "CycleError",
    "DetflowError",
    "EdgeSpec",
    "EvalError",
    "ExecutionConfig",
    "ExecutionFailed",
    "ExecutionResult",
    "ExecutionTrace",
    "FIRST_AVAILABLE",
    "FLOAT",
    "FailFast",
    "FanOutSpec",
    "Guard",
    "HttpProvider",
    "INT",
    "InternalInvariantError",
    "IterationLimitExceeded",
    "ListOf",
    "Metrics",
    "MissingKey",
    "MockProvider",
    "ModelAnomaly",
    "NoBranchTaken",
    "Node",
    "NodeRun",
    "OutputSchemaViolation",
    "ParseFailure",
    "Primitive",
    "Provider",
    "ProviderRequest",
    "ProviderResponse",
    "REQUIRE_ALL",
    "RecordOf",
    "RecoveryPolicy",
    "Retry",
    "STRING",
    "Schema",
    "SchemaViolation",
    "ScopeViolation",
    "ScratchSpace",
    "StallError",
    "StateEntry",
    "StateSnapshot",
    "StateStore",
    "SubgraphDef",
    "SubgraphSpec",
    "ToolBinding",
    "ToolCallRequest",
    "ToolFailed",
    "ToolRegistry",
    "ToolSpec",
    "ToolTimeout",
    "TraceEvent",
    "TransformRegistry",
    "UnknownTool",
    "ValidationFailed",
    "ValidationReport",
    "Value",
    "WorkflowDocument",
    "WorkflowGraph",
    "assemble_context",
    "build_tool_registry",
    "canonical_bytes",
    "canonical_digest",
    "canonical_obj",
    "compile_guard",
    "default_hub",
    "default_tool_registry",
    "encapsulate",
    "evaluate",
    "execute",
    "export_dot",
    "external_section",
    "final",
    "format_float",
    "from_plain",
    "inline",
    "layer_assignment",
    "load_state",
    "load_transcript",
    "load_workflow",
    "parse_source",
    "parse_structured_output",
    "print_expr",
    "record_from_plain",
    "record_of",
    "resume",
    "retry_delay_ms",
    "run_agent",
    "run_tool",
    "save_state_file",
    "save_transcript",
    "save_workflow",
    "throughput_opm",
    "to_plain",
    "tool_call",
    "tool_calls",
    "topological_order",
    "typecheck",
    "validate",
    "value_from_canonical_obj",
]
