/**
 * Host-side tool bridge. Tools registered here become foreign tools the
 * engine invokes over a local HTTP endpoint: POST /invoke with a canonical
 * args record, a canonical result record back. Arguments and results are
 * checked against the registered schemas on this side of the boundary, so a
 * non-conforming payload never reaches a host callable and a non-conforming
 * return never reaches the engine. Calls are serialized per tool id unless
 * a registration opts out.
 */

import { createServer, type IncomingMessage, type Server, type ServerResponse } from "node:http";
import type { AddressInfo } from "node:net";
import { canonicalStringify } from "./canonical.js";
import { DuplicateTool, SchemaBridgeError } from "./errors.js";
import {
  Schema,
  Value,
  canonicalObj,
  recordConformError,
  valueFromCanonicalObj,
} from "./values.js";

export type ToolFn = (args: Value) => Value | Promise<Value>;

export class ForeignToolHandle {
  constructor(
    readonly name: string,
    readonly input: Schema,
    readonly output: Schema,
  ) {}
}

export interface RegisterOptions {
  /** Set false to allow overlapping invocations of this tool. */
  serialized?: boolean;
}

interface Registration {
  handle: ForeignToolHandle;
  fn: ToolFn;
  serialized: boolean;
  chain: Promise<unknown>;
  calls: number;
}

const MAX_BODY_BYTES = 32 * 1024 * 1024;

export class ToolServer {
  private readonly tools = new Map<string, Registration>();
  private server: Server | null = null;
  private baseUrl: string | null = null;

  /**
   * Expose a host callable to the engine. The returned handle carries the
   * schemas and can be used directly when authoring workflow nodes.
   */
  registerTool(name: string, fn: ToolFn, input: Schema, output: Schema, opts: RegisterOptions = {}): ForeignToolHandle {
    if (!name || typeof name !== "string") throw new SchemaBridgeError("tool name must be a non-empty string");
    if (this.tools.has(name)) throw new DuplicateTool(`tool ${JSON.stringify(name)} is already registered`);
    if (!(input instanceof Schema) || !(output instanceof Schema)) {
      throw new SchemaBridgeError("registerTool needs Schema instances for input and output");
    }
    const handle = new ForeignToolHandle(name, input, output);
    this.tools.set(name, {
      handle,
      fn,
      serialized: opts.serialized ?? true,
      chain: Promise.resolve(),
      calls: 0,
    });
    return handle;
  }

  has(name: string): boolean {
    return this.tools.has(name);
  }

  /** How many times the host callable for `name` has been invoked. */
  callCount(name: string): number {
    return this.tools.get(name)?.calls ?? 0;
  }

  /** Start listening on an ephemeral local port; idempotent. */
  async start(): Promise<string> {
    if (this.baseUrl) return this.baseUrl;
    const server = createServer((req, res) => {
      this.handle(req, res).catch((exc: unknown) => {
        respond(res, 500, { error: `tool server failure: ${(exc as Error).message}` });
      });
    });
    // never hold the host process open on our account
    server.unref();
    await new Promise<void>((resolve, reject) => {
      server.once("error", reject);
      server.listen(0, "127.0.0.1", resolve);
    });
    const address = server.address() as AddressInfo;
    this.server = server;
    this.baseUrl = `http://127.0.0.1:${address.port}`;
    return this.baseUrl;
  }

  /** The base URL to pass as the engine's --tool-server. */
  url(): string {
    if (!this.baseUrl) throw new SchemaBridgeError("tool server is not running; call start() first");
    return this.baseUrl;
  }

  async close(): Promise<void> {
    const server = this.server;
    this.server = null;
    this.baseUrl = null;
    if (server) {
      await new Promise<void>((resolve) => {
        server.close(() => resolve());
        server.closeAllConnections();
      });
    }
  }

  private async handle(req: IncomingMessage, res: ServerResponse): Promise<void> {
    if (req.method !== "POST" || req.url !== "/invoke") {
      respond(res, 404, { error: "expected POST /invoke" });
      return;
    }
    let body: string;
    try {
      body = await readBody(req);
    } catch (exc) {
      respond(res, 400, { error: (exc as Error).message });
      return;
    }
    let tool: unknown;
    let argsObj: unknown;
    try {
      const parsed = JSON.parse(body) as { tool?: unknown; args?: unknown };
      tool = parsed.tool;
      argsObj = parsed.args;
    } catch {
      respond(res, 400, { error: "request body is not JSON" });
      return;
    }
    if (typeof tool !== "string") {
      respond(res, 400, { error: "request must name a tool" });
      return;
    }
    const reg = this.tools.get(tool);
    if (!reg) {
      respond(res, 404, { error: `unknown tool ${JSON.stringify(tool)}` });
      return;
    }

    let args: Value;
    try {
      args = valueFromCanonicalObj(argsObj ?? { t: "record", v: {} });
    } catch (exc) {
      respond(res, 400, { error: `args: ${(exc as Error).message}` });
      return;
    }
    const argsErr = recordConformError(args, reg.handle.input);
    if (argsErr) {
      respond(res, 400, { error: `args: ${argsErr}` });
      return;
    }

    const invoke = async (): Promise<Value> => {
      reg.calls += 1;
      return await reg.fn(args);
    };
    let result: Value;
    try {
      if (reg.serialized) {
        const turn = reg.chain.then(invoke, invoke);
        reg.chain = turn.then(
          () => undefined,
          () => undefined,
        );
        result = await turn;
      } else {
        result = await invoke();
      }
    } catch (exc) {
      respond(res, 500, { error: (exc as Error)?.message ?? String(exc) });
      return;
    }

    const resultErr =
      result && typeof result === "object" && "t" in result
        ? recordConformError(result, reg.handle.output)
        : "host tool did not return a Value";
    if (resultErr) {
      respond(res, 500, { error: `result: ${resultErr}` });
      return;
    }
    respond(res, 200, null, canonicalStringify({ result: canonicalObj(result) }));
  }
}

function respond(res: ServerResponse, status: number, errorBody: { error: string } | null, raw?: string): void {
  if (res.writableEnded) return;
  const payload = raw ?? JSON.stringify(errorBody);
  res.writeHead(status, { "content-type": "application/json" });
  res.end(payload);
}

function readBody(req: IncomingMessage): Promise<string> {
  return new Promise((resolve, reject) => {
    const chunks: Buffer[] = [];
    let size = 0;
    req.on("data", (chunk: Buffer) => {
      size += chunk.length;
      if (size > MAX_BODY_BYTES) {
        reject(new Error("request body too large"));
        req.destroy();
        return;
      }
      chunks.push(chunk);
    });
    req.on("end", () => resolve(Buffer.concat(chunks).toString("utf-8")));
    req.on("error", reject);
  });
}

let shared: ToolServer | null = null;

/** The process-wide server module-level registerTool registers into. */
export function defaultToolServer(): ToolServer {
  if (!shared) shared = new ToolServer();
  return shared;
}

/**
 * Register a host callable on the shared tool server. run() starts that
 * server automatically when a workflow declares foreign tools.
 */
export function registerTool(
  name: string,
  fn: ToolFn,
  input: Schema,
  output: Schema,
  opts: RegisterOptions = {},
): ForeignToolHandle {
  return defaultToolServer().registerTool(name, fn, input, output, opts);
}
