/**
 * Workflow documents. A document's "graph" member is the graph's canonical
 * object, so the document hash and the engine's in-memory graph hash are the
 * same string. Loading normalizes a parsed file into exactly the tree the
 * engine would re-serialize: descriptor field order, deduplicated tool
 * lists, int/float member types, retry policy shape.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { CanonicalJson, RawFloat, canonicalJsonBytes, compareCodePoints, digestOf } from "./canonical.js";
import { parseJsonPreserving } from "./jsonparse.js";
import { ParseFailure } from "./errors.js";
import { Schema, schemaDescriptor, schemaFromDescriptor } from "./values.js";
import { formatFloat } from "./floatfmt.js";

export const FORMAT_TAG = "detflow/1";

export const REQUIRE_ALL = "require_all";
export const FIRST_AVAILABLE = "first_available";

export const DEFAULT_MAX_ITERATIONS = 3;
export const DEFAULT_TOOL_TIMEOUT_MS = 30_000;
export const DEFAULT_FOREIGN_TIMEOUT_MS = 30_000;

type JsonObject = { [key: string]: CanonicalJson };

export interface ForeignToolBinding {
  name: string;
  input: Schema;
  output: Schema;
}

/**
 * A parsed or freshly built workflow document, held in normalized canonical
 * form. Instances are immutable; save() writes the same bytes the engine
 * would write for this document.
 */
export class Workflow {
  private constructor(
    private readonly obj: JsonObject,
    private readonly graphObj: JsonObject,
    private readonly entry: Schema,
    private readonly foreign: ReadonlyMap<string, ForeignToolBinding>,
  ) {}

  /** Canonical graph hash; identical to `detflow hash` for this document. */
  hash(): string {
    return digestOf(this.graphObj);
  }

  name(): string {
    return this.graphObj["name"] as string;
  }

  entrySchema(): Schema {
    return this.entry;
  }

  /** Foreign tool bindings declared by the document, keyed by tool ref. */
  foreignTools(): ReadonlyMap<string, ForeignToolBinding> {
    return this.foreign;
  }

  nodeIds(): string[] {
    return Object.keys(this.graphObj["nodes"] as JsonObject);
  }

  toBytes(): Buffer {
    return Buffer.concat([canonicalJsonBytes(this.obj), Buffer.from("\n")]);
  }

  save(path: string): void {
    writeFileSync(path, this.toBytes());
  }

  /** Normalize a parsed document tree. Internal; throws ParseFailure. */
  static fromTree(tree: CanonicalJson): Workflow {
    const root = asObject(tree, "document root");
    if (root["format"] !== FORMAT_TAG) {
      throw new ParseFailure(`unsupported format tag ${JSON.stringify(root["format"])}, expected "${FORMAT_TAG}"`);
    }
    for (const member of ["graph", "entry_state", "tools"]) {
      if (!(member in root)) throw new ParseFailure(`document is missing "${member}"`);
    }
    const graph = normalizeGraph(root["graph"], "graph");
    const entry = schemaFromDescriptor(root["entry_state"], "entry_state");
    const { tools, foreign } = normalizeTools(root["tools"]);
    const obj: JsonObject = {
      format: FORMAT_TAG,
      graph,
      entry_state: schemaDescriptor(entry),
      tools,
    };
    if ("provider" in root && root["provider"] !== null && root["provider"] !== undefined) {
      asObject(root["provider"], "provider");
      obj["provider"] = root["provider"];
    }
    return new Workflow(obj, graph, entry, foreign);
  }
}

/** Read and normalize a workflow document file. */
export function loadWorkflow(path: string): Workflow {
  let text: string;
  try {
    text = readFileSync(path, "utf-8");
  } catch (exc) {
    throw new ParseFailure(`cannot read workflow file ${path}: ${(exc as Error).message}`);
  }
  return Workflow.fromTree(parseJsonPreserving(text));
}

export function saveWorkflow(workflow: Workflow, path: string): void {
  workflow.save(path);
}

// --- normalization helpers -----------------------------------------------------

function asObject(x: CanonicalJson | undefined, where: string): JsonObject {
  if (typeof x !== "object" || x === null || Array.isArray(x) || x instanceof RawFloat) {
    throw new ParseFailure(`${where} must be an object`);
  }
  return x as JsonObject;
}

function asArray(x: CanonicalJson | undefined, where: string): CanonicalJson[] {
  if (!Array.isArray(x)) throw new ParseFailure(`${where} must be an array`);
  return x;
}

function toText(x: CanonicalJson | undefined, where: string): string {
  if (typeof x === "string") return x;
  if (typeof x === "number" || typeof x === "bigint") return String(x);
  if (x instanceof RawFloat) return formatFloat(x.value);
  throw new ParseFailure(`${where} must be a string`);
}

function toInt(x: CanonicalJson | undefined, where: string): number {
  if (typeof x === "number") return x;
  if (typeof x === "bigint") {
    if (x < BigInt(Number.MIN_SAFE_INTEGER) || x > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new ParseFailure(`${where} is out of range`);
    }
    return Number(x);
  }
  if (x instanceof RawFloat) return Math.trunc(x.value);
  if (typeof x === "string" && /^[+-]?[0-9]+$/.test(x)) return toInt(BigInt(x), where);
  throw new ParseFailure(`${where} must be an integer`);
}

function toFloatMember(x: CanonicalJson | undefined, where: string): number {
  if (typeof x === "number") return x;
  if (typeof x === "bigint") return Number(x);
  if (x instanceof RawFloat) return x.value;
  if (typeof x === "string") return Number(x);
  throw new ParseFailure(`${where} must be a number`);
}

function normalizeDescriptor(x: CanonicalJson | undefined, where: string): JsonObject {
  return schemaDescriptor(schemaFromDescriptor(x, where));
}

function sortedUniqueTexts(x: CanonicalJson | undefined, where: string): string[] {
  const items = asArray(x, where).map((t, i) => toText(t, `${where}[${i}]`));
  return [...new Set(items)].sort(compareCodePoints);
}

function normalizeStringMap(x: CanonicalJson | undefined, where: string): JsonObject {
  const src = asObject(x, where);
  const out: JsonObject = {};
  for (const [k, v] of Object.entries(src)) out[k] = toText(v, `${where}.${k}`);
  return out;
}

function normalizeRetry(x: CanonicalJson | undefined, where: string): JsonObject {
  const obj = asObject(x, where);
  if (obj["kind"] === "fail_fast") return { kind: "fail_fast" };
  const policy = {
    kind: "retry",
    max_attempts: toInt(obj["max_attempts"], `${where}.max_attempts`),
    base_delay_ms: toInt(obj["base_delay_ms"], `${where}.base_delay_ms`),
    factor: new RawFloat(toFloatMember(obj["factor"], `${where}.factor`)),
    cap_ms: toInt(obj["cap_ms"], `${where}.cap_ms`),
  };
  if (policy.max_attempts < 1) throw new ParseFailure(`${where}: max_attempts must be >= 1`);
  if (policy.base_delay_ms < 0 || policy.cap_ms < 0) throw new ParseFailure(`${where}: delays must be non-negative`);
  if (policy.factor.value < 1.0) throw new ParseFailure(`${where}: factor must be >= 1.0`);
  return policy;
}

function normalizeNode(x: CanonicalJson, where: string): JsonObject {
  const obj = asObject(x, where);
  const kind = obj["kind"];
  if (kind === "agent") {
    const maxIterations = toInt(obj["max_iterations"], `${where}.max_iterations`);
    if (maxIterations < 1) throw new ParseFailure(`${where}: max_iterations must be >= 1`);
    return {
      kind: "agent",
      system_prompt: toText(obj["system_prompt"], `${where}.system_prompt`),
      input: normalizeDescriptor(obj["input"], `${where}.input`),
      output: normalizeDescriptor(obj["output"], `${where}.output`),
      tools: sortedUniqueTexts(obj["tools"], `${where}.tools`),
      state_reads: sortedUniqueTexts(obj["state_reads"], `${where}.state_reads`),
      max_iterations: maxIterations,
    };
  }
  if (kind === "tool") {
    const timeoutMs = toInt(obj["timeout_ms"], `${where}.timeout_ms`);
    if (timeoutMs <= 0) throw new ParseFailure(`${where}: timeout_ms must be positive`);
    return {
      kind: "tool",
      tool: toText(obj["tool"], `${where}.tool`),
      input: normalizeDescriptor(obj["input"], `${where}.input`),
      output: normalizeDescriptor(obj["output"], `${where}.output`),
      timeout_ms: timeoutMs,
      retry: normalizeRetry(obj["retry"], `${where}.retry`),
    };
  }
  if (kind === "branch") {
    const guards = asArray(obj["guards"], `${where}.guards`).map((g, i) => {
      const guard = asObject(g, `${where}.guards[${i}]`);
      return {
        edge: toText(guard["edge"], `${where}.guards[${i}].edge`),
        when: toText(guard["when"], `${where}.guards[${i}].when`),
      };
    });
    return { kind: "branch", schema: normalizeDescriptor(obj["schema"], `${where}.schema`), guards };
  }
  if (kind === "fanout") {
    return { kind: "fanout", schema: normalizeDescriptor(obj["schema"], `${where}.schema`) };
  }
  if (kind === "aggregate") {
    const policy = toText(obj["policy"], `${where}.policy`);
    if (policy !== REQUIRE_ALL && policy !== FIRST_AVAILABLE) {
      throw new ParseFailure(`${where}: unknown aggregate policy ${JSON.stringify(policy)}`);
    }
    return { kind: "aggregate", policy };
  }
  if (kind === "subgraph") {
    return {
      kind: "subgraph",
      name: toText(obj["name"], `${where}.name`),
      graph: normalizeGraph(obj["graph"], `${where}.graph`),
      inputs: normalizeStringMap(obj["inputs"], `${where}.inputs`),
      outputs: normalizeStringMap(obj["outputs"], `${where}.outputs`),
    };
  }
  throw new ParseFailure(`${where}: unknown node kind ${JSON.stringify(kind)}`);
}

export function normalizeGraph(x: CanonicalJson | undefined, where: string): JsonObject {
  const obj = asObject(x, where);
  const nodesIn = asObject(obj["nodes"], `${where}.nodes`);
  const edgesIn = asObject(obj["edges"], `${where}.edges`);
  const nodes: JsonObject = {};
  for (const id of Object.keys(nodesIn).sort(compareCodePoints)) {
    if (!id) throw new ParseFailure(`${where}.nodes: node id must be a non-empty string`);
    nodes[id] = normalizeNode(nodesIn[id]!, `${where}.nodes.${id}`);
  }
  const edges: JsonObject = {};
  for (const id of Object.keys(edgesIn).sort(compareCodePoints)) {
    const e = asObject(edgesIn[id], `${where}.edges.${id}`);
    const src = toText(e["src"], `${where}.edges.${id}.src`);
    const dst = toText(e["dst"], `${where}.edges.${id}.dst`);
    if (!(src in nodes)) throw new ParseFailure(`${where}.edges.${id}: unknown source node ${JSON.stringify(src)}`);
    if (!(dst in nodes)) throw new ParseFailure(`${where}.edges.${id}: unknown target node ${JSON.stringify(dst)}`);
    if (src === dst) throw new ParseFailure(`${where}.edges.${id}: self-loop on ${JSON.stringify(src)}`);
    if (!("transform" in e)) throw new ParseFailure(`${where}.edges.${id}: missing "transform"`);
    if (!("map" in e)) throw new ParseFailure(`${where}.edges.${id}: missing "map"`);
    edges[id] = {
      src,
      dst,
      transform: e["transform"] === null ? null : toText(e["transform"], `${where}.edges.${id}.transform`),
      map: e["map"] === null ? null : normalizeStringMap(e["map"], `${where}.edges.${id}.map`),
    };
  }
  return {
    name: toText(obj["name"], `${where}.name`),
    version: toText(obj["version"], `${where}.version`),
    nodes,
    edges,
  };
}

function normalizeTools(x: CanonicalJson | undefined): {
  tools: JsonObject;
  foreign: Map<string, ForeignToolBinding>;
} {
  const src = asObject(x, "tools");
  const tools: JsonObject = {};
  const foreign = new Map<string, ForeignToolBinding>();
  for (const [ref, bindingTree] of Object.entries(src)) {
    const binding = asObject(bindingTree, `tools.${ref}`);
    if ("builtin" in binding) {
      tools[ref] = { builtin: toText(binding["builtin"], `tools.${ref}.builtin`) };
    } else if ("foreign" in binding) {
      const input = schemaFromDescriptor(binding["input"], `tools.${ref}.input`);
      const output = schemaFromDescriptor(binding["output"], `tools.${ref}.output`);
      const name = toText(binding["foreign"], `tools.${ref}.foreign`);
      tools[ref] = { foreign: name, input: schemaDescriptor(input), output: schemaDescriptor(output) };
      foreign.set(ref, { name, input, output });
    } else {
      throw new ParseFailure(`tools.${ref}: binding must name a builtin or a foreign tool`);
    }
  }
  return { tools, foreign };
}
