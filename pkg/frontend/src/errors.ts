/**
 * Typed errors raised by the client. Engine-side failures surface here as
 * host exceptions carrying whatever structure the CLI reported (validation
 * findings, the failing node, partial run identifiers).
 */

export class DetflowClientError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** A value or schema cannot cross the host/engine boundary losslessly. */
export class SchemaBridgeError extends DetflowClientError {}

/** A tool name was registered twice on the same server. */
export class DuplicateTool extends DetflowClientError {}

// --- workflow construction ---------------------------------------------------

export class DuplicateNodeId extends DetflowClientError {}
export class DuplicateEdgeId extends DetflowClientError {}
export class UnknownNode extends DetflowClientError {}
export class SelfLoop extends DetflowClientError {}
export class InvalidNodeSpec extends DetflowClientError {}
export class InvalidEdgeSpec extends DetflowClientError {}

/** A workflow file (or an engine reply) could not be parsed. */
export class ParseFailure extends DetflowClientError {}

/** Initial state does not conform to the workflow's entry schema. */
export class SchemaViolation extends DetflowClientError {}

/** The detflow executable was not found or could not be spawned. */
export class EngineNotFound extends DetflowClientError {}

// --- native validation -------------------------------------------------------

export interface Finding {
  severity: "error" | "warning";
  code: string;
  /** Node or edge id the finding points at, when it names one. */
  where: string | null;
  message: string;
}

/**
 * Native validation rejected the graph. `findings` carries the engine's
 * report one entry per finding, exactly as the validator produced it.
 */
export class ValidationFailed extends DetflowClientError {
  readonly findings: readonly Finding[];

  constructor(findings: readonly Finding[]) {
    const lines = findings.map(findingToString).join("; ");
    super(`validation failed: ${lines}`);
    this.findings = findings;
  }

  codes(): Set<string> {
    return new Set(this.findings.map((f) => f.code));
  }
}

export function findingToString(f: Finding): string {
  const where = f.where ? ` [${f.where}]` : "";
  return `${f.severity}:${f.code}${where}: ${f.message}`;
}

/** Parse validator stderr lines of the form `severity:Code [where]: message`. */
export function parseFindings(text: string): Finding[] {
  const findings: Finding[] = [];
  for (const line of text.split("\n")) {
    const m = /^(error|warning):([A-Za-z][A-Za-z0-9]*)( \[([^\]]*)\])?: (.*)$/.exec(line);
    if (m) {
      findings.push({
        severity: m[1] as "error" | "warning",
        code: m[2]!,
        where: m[4] ?? null,
        message: m[5]!,
      });
    }
  }
  return findings;
}

// --- execution ----------------------------------------------------------------

/**
 * A run failed terminally. When the engine produced a partial result before
 * failing, `graphHash` and `traceDigest` identify it.
 */
export class ExecutionFailed extends DetflowClientError {
  readonly nodeId: string | null;
  readonly graphHash: string | null;
  readonly traceDigest: string | null;
  readonly stderr: string;

  constructor(
    message: string,
    detail: { nodeId?: string | null; graphHash?: string | null; traceDigest?: string | null; stderr?: string } = {},
  ) {
    super(message);
    this.nodeId = detail.nodeId ?? null;
    this.graphHash = detail.graphHash ?? null;
    this.traceDigest = detail.traceDigest ?? null;
    this.stderr = detail.stderr ?? "";
  }
}

/** A tool invocation (foreign or builtin) was the terminal cause. */
export class ToolFailed extends ExecutionFailed {}
