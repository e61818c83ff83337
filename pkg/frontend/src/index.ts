/**
 * Client binding for the detflow engine. The engine stays authoritative for
 * execution and validation; this package supplies typed values that cross
 * the boundary losslessly, a fluent workflow builder whose documents hash
 * identically to natively authored ones, a tool bridge that exposes host
 * callables to running workflows, and run/resume drivers over the CLI.
 */

export {
  EMPTY_SCHEMA,
  INT64_MAX,
  INT64_MIN,
  Schema,
  V,
  canonicalBytes,
  canonicalDigest,
  canonicalLine,
  canonicalObj,
  conformError,
  listOf,
  plainText,
  recordConformError,
  recordField,
  recordOf,
  valueFromCanonicalObj,
  valueFromCanonicalText,
  valuesEqual,
  type FieldType,
  type Primitive,
  type Value,
} from "./values.js";

export { formatFloat, parseFloatText } from "./floatfmt.js";

export {
  workflow,
  WorkflowBuilder,
  type AgentOptions,
  type BranchOptions,
  type BuildOptions,
  type ConnectOptions,
  type GuardSpec,
  type RetryOptions,
  type SchemaLike,
  type ToolOptions,
} from "./builder.js";

export {
  FIRST_AVAILABLE,
  REQUIRE_ALL,
  Workflow,
  loadWorkflow,
  saveWorkflow,
  type ForeignToolBinding,
} from "./document.js";

export {
  ForeignToolHandle,
  ToolServer,
  defaultToolServer,
  registerTool,
  type RegisterOptions,
  type ToolFn,
} from "./toolserver.js";

export {
  finalResponse,
  resume,
  run,
  toolCallResponse,
  type ResumeOptions,
  type RunOptions,
  type RunResult,
  type TranscriptEntry,
  type TranscriptToolCall,
} from "./run.js";

export {
  DetflowClientError,
  DuplicateEdgeId,
  DuplicateNodeId,
  DuplicateTool,
  EngineNotFound,
  ExecutionFailed,
  InvalidEdgeSpec,
  InvalidNodeSpec,
  ParseFailure,
  SchemaBridgeError,
  SchemaViolation,
  SelfLoop,
  ToolFailed,
  UnknownNode,
  ValidationFailed,
  type Finding,
} from "./errors.js";
