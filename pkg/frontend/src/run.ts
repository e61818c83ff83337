/**
 * Run orchestration over the engine CLI. A run writes the workflow, initial
 * state, and any mock transcript to a scratch directory, drives `detflow
 * run` (or `resume`), and maps the outcome back into host types: the final
 * state as typed values, the trace digest, and typed errors for validation,
 * schema, and execution failures.
 */

import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { canonicalStringify, type CanonicalJson } from "./canonical.js";
import { invoke, stdoutFields } from "./cli.js";
import { Workflow, loadWorkflow } from "./document.js";
import {
  ExecutionFailed,
  ParseFailure,
  SchemaViolation,
  ToolFailed,
  ValidationFailed,
  parseFindings,
} from "./errors.js";
import { ToolServer, defaultToolServer } from "./toolserver.js";
import {
  Value,
  canonicalObj,
  conformError,
  plainStateText,
  plainText,
  valueFromCanonicalObj,
} from "./values.js";

// --- mock transcripts -----------------------------------------------------------

export interface TranscriptToolCall {
  name: string;
  args: Value | null;
  argsText?: string;
}

export interface TranscriptEntry {
  node: string;
  iteration: number;
  final?: string;
  toolCalls?: TranscriptToolCall[];
}

/** A scripted model reply: the agent's final structured output. */
export function finalResponse(node: string, iteration: number, output: Value | string): TranscriptEntry {
  return { node, iteration, final: typeof output === "string" ? output : plainText(output) };
}

/** A scripted model reply: one tool call request. */
export function toolCallResponse(node: string, iteration: number, name: string, args: Value | null): TranscriptEntry {
  return { node, iteration, toolCalls: [{ name, args }] };
}

function transcriptText(entries: readonly TranscriptEntry[]): string {
  const responses: CanonicalJson[] = entries.map((entry) => {
    if (entry.final !== undefined) {
      return { node: entry.node, iteration: entry.iteration, final: entry.final };
    }
    const calls: CanonicalJson[] = (entry.toolCalls ?? []).map((c) => ({
      name: c.name,
      args: c.args === null ? null : canonicalObj(c.args),
      args_text: c.argsText ?? "",
    }));
    return { node: entry.node, iteration: entry.iteration, tool_calls: calls };
  });
  return canonicalStringify({ responses });
}

// --- options and results -----------------------------------------------------------

export interface RunOptions {
  /** Entry-state values, checked against the entry schema before spawning. */
  initialState?: Record<string, Value> | ReadonlyMap<string, Value>;
  workers?: number;
  seed?: number;
  provider?: "mock" | "fuzz";
  /** Scripted mock replies, inline or as a transcript file path. */
  transcript?: readonly TranscriptEntry[] | string;
  /** Tool bridge for foreign tools; defaults to the shared server when needed. */
  toolServer?: ToolServer | string;
  /** Write a checkpoint here while running (enables resume). */
  checkpointPath?: string;
  /** Stop after this many commits; the run reports status "stopped". */
  stopAfterCommits?: number;
  watchdogMs?: number;
  traceOut?: string;
  stateOut?: string;
  metricsOut?: string;
  bin?: string;
}

export type ResumeOptions = Omit<RunOptions, "initialState" | "checkpointPath" | "stopAfterCommits">;

export interface RunResult {
  graphHash: string;
  traceDigest: string;
  status: "ok" | "stopped";
  /** Node outputs and entry values at the end of the run, keyed by store key. */
  finalState: Map<string, Value>;
  logicalTime: number;
  /** The canonical state file bytes; equal runs produce equal bytes. */
  stateBytes: Buffer;
  metrics: Record<string, unknown> | null;
  stdout: string;
}

/** Execute a workflow through the engine and wait for the outcome. */
export async function run(workflow: Workflow | string, opts: RunOptions = {}): Promise<RunResult> {
  const wf = typeof workflow === "string" ? loadWorkflow(workflow) : workflow;
  checkInitialState(wf, opts.initialState);
  return await drive(wf, null, opts);
}

/** Continue an interrupted run from its checkpoint file. */
export async function resume(
  checkpointPath: string,
  workflow: Workflow | string,
  opts: ResumeOptions = {},
): Promise<RunResult> {
  const wf = typeof workflow === "string" ? loadWorkflow(workflow) : workflow;
  return await drive(wf, checkpointPath, opts);
}

// --- internals ------------------------------------------------------------------------

function checkInitialState(
  wf: Workflow,
  state: Record<string, Value> | ReadonlyMap<string, Value> | undefined,
): void {
  if (state === undefined) return;
  const entries = state instanceof Map ? [...state.entries()] : Object.entries(state);
  const schema = wf.entrySchema();
  for (const [key, value] of entries) {
    const ftype = schema.get(key);
    if (ftype === undefined) {
      throw new SchemaViolation(`state key ${JSON.stringify(key)} is not in the entry-state schema`);
    }
    const err = conformError(value, ftype, key);
    if (err) throw new SchemaViolation(err);
  }
}

async function resolveToolServer(wf: Workflow, opts: RunOptions | ResumeOptions): Promise<string | null> {
  if (typeof opts.toolServer === "string") return opts.toolServer;
  if (opts.toolServer instanceof ToolServer) return await opts.toolServer.start();
  const wanted = [...wf.foreignTools().values()].map((b) => b.name);
  if (wanted.length === 0) return null;
  const shared = defaultToolServer();
  return wanted.some((name) => shared.has(name)) ? await shared.start() : null;
}

async function drive(wf: Workflow, checkpointToResume: string | null, opts: RunOptions): Promise<RunResult> {
  const dir = mkdtempSync(join(tmpdir(), "detflow-run-"));
  try {
    const wfPath = join(dir, "workflow.flow.json");
    wf.save(wfPath);

    const args = checkpointToResume === null ? ["run", wfPath] : ["resume", checkpointToResume, wfPath];

    if (opts.initialState !== undefined && checkpointToResume === null) {
      const statePath = join(dir, "state.json");
      writeFileSync(statePath, plainStateText(opts.initialState) + "\n");
      args.push("--state", statePath);
    }
    if (typeof opts.transcript === "string") {
      args.push("--transcript", opts.transcript);
    } else if (opts.transcript !== undefined) {
      const transcriptPath = join(dir, "transcript.json");
      writeFileSync(transcriptPath, transcriptText(opts.transcript) + "\n");
      args.push("--transcript", transcriptPath);
    }
    const serverUrl = await resolveToolServer(wf, opts);
    if (serverUrl) args.push("--tool-server", serverUrl);

    if (opts.provider !== undefined) args.push("--provider", opts.provider);
    if (opts.workers !== undefined) args.push("--workers", String(opts.workers));
    if (opts.seed !== undefined) args.push("--seed", String(opts.seed));
    if (opts.watchdogMs !== undefined) args.push("--watchdog-ms", String(opts.watchdogMs));
    if (opts.checkpointPath !== undefined) args.push("--checkpoint", opts.checkpointPath);
    if (opts.stopAfterCommits !== undefined) args.push("--stop-after-commits", String(opts.stopAfterCommits));
    if (opts.traceOut !== undefined) args.push("--trace-out", opts.traceOut);
    if (opts.metricsOut !== undefined) args.push("--metrics-out", opts.metricsOut);

    const statePath = opts.stateOut ?? join(dir, "final-state.json");
    args.push("--state-out", statePath);

    const res = await invoke(args, opts.bin !== undefined ? { bin: opts.bin } : {});
    const fields = stdoutFields(res.stdout);

    if (res.code === 2) {
      const findings = parseFindings(res.stderr);
      if (findings.length > 0) throw new ValidationFailed(findings);
      const detail = res.stderr.trim().replace(/^error: /, "");
      if (/state file|expected .*, got /.test(detail)) throw new SchemaViolation(detail);
      throw new ParseFailure(detail || "engine rejected the input");
    }
    if (res.code !== 0) {
      throw executionError(res.stderr, fields);
    }

    const status = fields.get("status");
    const graphHash = fields.get("graph_hash");
    const traceDigest = fields.get("trace_digest");
    if (!graphHash || !traceDigest || (status !== "ok" && status !== "stopped")) {
      throw new ParseFailure(`unexpected engine output:\n${res.stdout}`);
    }

    const stateBytes = readFileSync(statePath);
    const parsedState = JSON.parse(stateBytes.toString("utf-8")) as {
      logical_time: number;
      values: Record<string, unknown>;
    };
    const finalState = new Map<string, Value>();
    for (const [key, obj] of Object.entries(parsedState.values)) {
      finalState.set(key, valueFromCanonicalObj(obj));
    }

    let metrics: Record<string, unknown> | null = null;
    if (opts.metricsOut !== undefined) {
      const report = readFileSync(opts.metricsOut, "utf-8");
      const line = report.split("\n").find((l) => l.startsWith("JSON: "));
      if (line) metrics = JSON.parse(line.slice("JSON: ".length)) as Record<string, unknown>;
    }

    return {
      graphHash,
      traceDigest,
      status,
      finalState,
      logicalTime: parsedState.logical_time,
      stateBytes,
      metrics,
      stdout: res.stdout,
    };
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

function executionError(stderr: string, fields: Map<string, string>): ExecutionFailed {
  const line = stderr
    .split("\n")
    .filter((l) => l.startsWith("error: "))
    .pop();
  const message = line ? line.slice("error: ".length) : stderr.trim() || "execution failed";
  const m = /^node '([^']+)' failed: (.*)$/.exec(message);
  const detail = {
    nodeId: m ? m[1]! : null,
    graphHash: fields.get("graph_hash") ?? null,
    traceDigest: fields.get("trace_digest") ?? null,
    stderr,
  };
  const cause = m ? m[2]! : message;
  if (/^(foreign )?tool\b|^tool server\b/.test(cause)) {
    return new ToolFailed(message, detail);
  }
  return new ExecutionFailed(message, detail);
}
