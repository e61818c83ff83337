/**
 * Fluent workflow authoring. The builder assembles a document tree in the
 * engine's canonical shape, applies the same structural rules the engine
 * applies at construction time, and hands semantic validation to the native
 * validator: build() runs `detflow validate` and surfaces its findings as a
 * typed host exception, so a workflow built here and the same workflow
 * loaded from a file hash identically or fail identically.
 */

import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { CanonicalJson, RawFloat, compareCodePoints } from "./canonical.js";
import { invokeSync } from "./cli.js";
import {
  DEFAULT_MAX_ITERATIONS,
  DEFAULT_TOOL_TIMEOUT_MS,
  FIRST_AVAILABLE,
  FORMAT_TAG,
  REQUIRE_ALL,
  Workflow,
} from "./document.js";
import {
  DetflowClientError,
  DuplicateEdgeId,
  DuplicateNodeId,
  InvalidEdgeSpec,
  InvalidNodeSpec,
  ParseFailure,
  SchemaBridgeError,
  SelfLoop,
  UnknownNode,
  ValidationFailed,
  parseFindings,
} from "./errors.js";
import { FieldType, Schema, schemaDescriptor } from "./values.js";
import type { ForeignToolHandle } from "./toolserver.js";

type JsonObject = { [key: string]: CanonicalJson };

export type SchemaLike = Schema | Record<string, FieldType>;

function toSchema(s: SchemaLike): Schema {
  return s instanceof Schema ? s : new Schema(s);
}

export interface RetryOptions {
  maxAttempts: number;
  baseDelayMs?: number;
  factor?: number;
  capMs?: number;
}

export interface AgentOptions {
  systemPrompt: string;
  input: SchemaLike;
  output: SchemaLike;
  tools?: readonly (string | ForeignToolHandle)[];
  stateReads?: readonly string[];
  maxIterations?: number;
}

export interface ToolOptions {
  tool: string | ForeignToolHandle;
  input?: SchemaLike;
  output?: SchemaLike;
  timeoutMs?: number;
  retry?: RetryOptions;
}

export interface GuardSpec {
  edge: string;
  when: string;
}

export interface BranchOptions {
  schema: SchemaLike;
  guards: readonly GuardSpec[];
}

export interface ConnectOptions {
  fieldMap?: Record<string, string> | readonly [string, string][];
  transform?: string;
  edgeId?: string;
}

export interface BuildOptions {
  /** Skip the native validation pass; hashes still work, running may not. */
  validate?: boolean;
  bin?: string;
}

export function workflow(name: string, version = "1"): WorkflowBuilder {
  return new WorkflowBuilder(name, version);
}

export class WorkflowBuilder {
  private readonly nodes = new Map<string, JsonObject>();
  private readonly edges = new Map<string, JsonObject>();
  private readonly toolBindings = new Map<string, JsonObject>();
  private entry: Schema = new Schema();

  constructor(
    private readonly name: string,
    private readonly version: string,
  ) {}

  private addNode(id: string, spec: JsonObject): this {
    if (!id || typeof id !== "string") throw new InvalidNodeSpec(`node id must be a non-empty string`);
    if (this.nodes.has(id)) throw new DuplicateNodeId(`node ${JSON.stringify(id)} already present`);
    this.nodes.set(id, spec);
    return this;
  }

  private bindForeign(handle: ForeignToolHandle, ref: string): void {
    const binding: JsonObject = {
      foreign: handle.name,
      input: schemaDescriptor(handle.input),
      output: schemaDescriptor(handle.output),
    };
    const existing = this.toolBindings.get(ref);
    if (existing && JSON.stringify(existing) !== JSON.stringify(binding)) {
      throw new InvalidNodeSpec(`tool ref ${JSON.stringify(ref)} is already bound to a different tool`);
    }
    this.toolBindings.set(ref, binding);
  }

  private toolRef(tool: string | ForeignToolHandle): string {
    if (typeof tool === "string") return tool;
    this.bindForeign(tool, tool.name);
    return tool.name;
  }

  /** An LLM-driven node with typed input/output and an allow-listed tool set. */
  agent(id: string, opts: AgentOptions): this {
    const maxIterations = opts.maxIterations ?? DEFAULT_MAX_ITERATIONS;
    if (maxIterations < 1) throw new InvalidNodeSpec("maxIterations must be >= 1");
    const refs = (opts.tools ?? []).map((t) => this.toolRef(t));
    return this.addNode(id, {
      kind: "agent",
      system_prompt: opts.systemPrompt,
      input: schemaDescriptor(toSchema(opts.input)),
      output: schemaDescriptor(toSchema(opts.output)),
      tools: [...new Set(refs)].sort(compareCodePoints),
      state_reads: [...new Set(opts.stateReads ?? [])].sort(compareCodePoints),
      max_iterations: maxIterations,
    });
  }

  /** A deterministic function node executed natively with timeout and retry. */
  tool(id: string, opts: ToolOptions): this {
    const timeoutMs = opts.timeoutMs ?? DEFAULT_TOOL_TIMEOUT_MS;
    if (timeoutMs <= 0) throw new InvalidNodeSpec("timeoutMs must be positive");
    const handle = typeof opts.tool === "string" ? null : opts.tool;
    const input = opts.input !== undefined ? toSchema(opts.input) : handle?.input;
    const output = opts.output !== undefined ? toSchema(opts.output) : handle?.output;
    if (!input || !output) {
      throw new InvalidNodeSpec("tool nodes bound to a builtin need explicit input and output schemas");
    }
    return this.addNode(id, {
      kind: "tool",
      tool: this.toolRef(opts.tool),
      input: schemaDescriptor(input),
      output: schemaDescriptor(output),
      timeout_ms: timeoutMs,
      retry: retryObj(opts.retry),
    });
  }

  /** Routes along the first out-edge whose guard predicate is true. */
  branch(id: string, opts: BranchOptions): this {
    return this.addNode(id, {
      kind: "branch",
      schema: schemaDescriptor(toSchema(opts.schema)),
      guards: opts.guards.map((g) => ({ edge: g.edge, when: g.when })),
    });
  }

  /** Copies its input to every out-edge. */
  fanout(id: string, schema: SchemaLike): this {
    return this.addNode(id, { kind: "fanout", schema: schemaDescriptor(toSchema(schema)) });
  }

  /** Joins inbound arms, waiting for all or taking the first available. */
  aggregate(id: string, policy: typeof REQUIRE_ALL | typeof FIRST_AVAILABLE): this {
    if (policy !== REQUIRE_ALL && policy !== FIRST_AVAILABLE) {
      throw new InvalidNodeSpec(`unknown aggregate policy ${JSON.stringify(policy)}`);
    }
    return this.addNode(id, { kind: "aggregate", policy });
  }

  /** A typed data edge; omitting fieldMap carries fields through by name. */
  connect(src: string, dst: string, opts: ConnectOptions = {}): this {
    if (!this.nodes.has(src)) throw new UnknownNode(`unknown source node ${JSON.stringify(src)}`);
    if (!this.nodes.has(dst)) throw new UnknownNode(`unknown target node ${JSON.stringify(dst)}`);
    if (src === dst) throw new SelfLoop(`self-loop on ${JSON.stringify(src)}`);
    let edgeId = opts.edgeId;
    if (edgeId === undefined) {
      const base = `${src}->${dst}`;
      edgeId = base;
      for (let k = 2; this.edges.has(edgeId); k++) edgeId = `${base}#${k}`;
    } else if (this.edges.has(edgeId)) {
      throw new DuplicateEdgeId(`edge ${JSON.stringify(edgeId)} already present`);
    }
    this.edges.set(edgeId, {
      src,
      dst,
      transform: opts.transform ?? null,
      map: normalizeFieldMap(opts.fieldMap),
    });
    return this;
  }

  /** Declare the schema initial state is decoded against. */
  entryState(schema: SchemaLike): this {
    this.entry = toSchema(schema);
    return this;
  }

  /** Bind a foreign tool under an explicit ref name. */
  bindTool(ref: string, handle: ForeignToolHandle): this {
    this.bindForeign(handle, ref);
    return this;
  }

  /** The document tree as built so far, without validation. */
  document(): CanonicalJson {
    const nodes: JsonObject = {};
    for (const [id, spec] of this.nodes) nodes[id] = spec;
    const edges: JsonObject = {};
    for (const [id, spec] of this.edges) edges[id] = spec;
    const tools: JsonObject = {};
    for (const [ref, binding] of this.toolBindings) tools[ref] = binding;
    return {
      format: FORMAT_TAG,
      graph: { name: this.name, version: this.version, nodes, edges },
      entry_state: schemaDescriptor(this.entry),
      tools,
    };
  }

  /**
   * Seal the workflow. Runs the native validator; an unexecutable graph
   * raises ValidationFailed with the engine's findings attached, and the
   * returned workflow's hash is cross-checked against the engine's.
   */
  build(opts: BuildOptions = {}): Workflow {
    const wf = Workflow.fromTree(this.document());
    if (opts.validate === false) return wf;

    const dir = mkdtempSync(join(tmpdir(), "detflow-build-"));
    try {
      const path = join(dir, "workflow.flow.json");
      writeFileSync(path, wf.toBytes());
      const res = invokeSync(["validate", path], opts.bin !== undefined ? { bin: opts.bin } : {});
      if (res.code === 0) {
        const m = /^ok: ([0-9a-f]{64})$/m.exec(res.stdout);
        if (m && m[1] !== wf.hash()) {
          throw new SchemaBridgeError(`canonical hash mismatch: host ${wf.hash()}, engine ${m[1]}`);
        }
        return wf;
      }
      const findings = parseFindings(res.stderr);
      if (findings.length > 0) throw new ValidationFailed(findings);
      const detail = res.stderr.trim().replace(/^error: /, "");
      if (res.code === 2) throw new ParseFailure(detail || "validation rejected the document");
      throw new DetflowClientError(`validate exited with code ${res.code}: ${detail}`);
    } finally {
      rmSync(dir, { recursive: true, force: true });
    }
  }
}

function retryObj(retry: RetryOptions | undefined): JsonObject {
  if (retry === undefined) return { kind: "fail_fast" };
  const policy = {
    kind: "retry",
    max_attempts: retry.maxAttempts,
    base_delay_ms: retry.baseDelayMs ?? 100,
    factor: new RawFloat(retry.factor ?? 2.0),
    cap_ms: retry.capMs ?? 10_000,
  };
  if (policy.max_attempts < 1) throw new InvalidNodeSpec("maxAttempts must be >= 1");
  if (policy.base_delay_ms < 0 || policy.cap_ms < 0) throw new InvalidNodeSpec("delays must be non-negative");
  if (policy.factor.value < 1.0) throw new InvalidNodeSpec("factor must be >= 1.0");
  return policy;
}

function normalizeFieldMap(
  fieldMap: Record<string, string> | readonly [string, string][] | undefined,
): CanonicalJson {
  if (fieldMap === undefined) return null;
  const pairs = Array.isArray(fieldMap) ? fieldMap : Object.entries(fieldMap);
  const out: JsonObject = {};
  for (const [src, dst] of pairs) {
    if (src in out) {
      // one source field cannot feed two targets on a single edge; the
      // serialized form is keyed by source field, so use a parallel edge
      throw new InvalidEdgeSpec(`field map uses source field ${JSON.stringify(src)} more than once`);
    }
    out[src] = dst;
  }
  return out;
}
