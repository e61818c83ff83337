/**
 * Subprocess plumbing for the engine CLI. Every engine interaction in this
 * package goes through here: resolve the binary, spawn, collect output.
 */

import { spawn, spawnSync } from "node:child_process";
import { EngineNotFound } from "./errors.js";

export function engineBin(): string {
  return process.env["DETFLOW_BIN"] || "detflow";
}

export interface EngineOutput {
  code: number;
  stdout: string;
  stderr: string;
}

function notFound(bin: string): EngineNotFound {
  return new EngineNotFound(
    `cannot run ${JSON.stringify(bin)}; install the engine or point DETFLOW_BIN at the executable`,
  );
}

/** Run the CLI synchronously. Used where no host callback can be pending. */
export function invokeSync(args: string[], opts: { bin?: string; input?: string | Buffer } = {}): EngineOutput {
  const bin = opts.bin ?? engineBin();
  const res = spawnSync(bin, args, {
    input: opts.input,
    encoding: "utf-8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (res.error) {
    if ((res.error as NodeJS.ErrnoException).code === "ENOENT") throw notFound(bin);
    throw res.error;
  }
  return { code: res.status ?? -1, stdout: res.stdout, stderr: res.stderr };
}

/** Run the CLI without blocking the event loop, so local tool servers can serve. */
export function invoke(args: string[], opts: { bin?: string } = {}): Promise<EngineOutput> {
  const bin = opts.bin ?? engineBin();
  return new Promise((resolve, reject) => {
    const child = spawn(bin, args, { stdio: ["ignore", "pipe", "pipe"] });
    const out: Buffer[] = [];
    const err: Buffer[] = [];
    child.stdout.on("data", (chunk: Buffer) => out.push(chunk));
    child.stderr.on("data", (chunk: Buffer) => err.push(chunk));
    child.on("error", (exc: NodeJS.ErrnoException) => {
      reject(exc.code === "ENOENT" ? notFound(bin) : exc);
    });
    child.on("close", (code) => {
      resolve({
        code: code ?? -1,
        stdout: Buffer.concat(out).toString("utf-8"),
        stderr: Buffer.concat(err).toString("utf-8"),
      });
    });
  });
}

/** Parse `key: value` lines the run subcommands print. */
export function stdoutFields(stdout: string): Map<string, string> {
  const fields = new Map<string, string>();
  for (const line of stdout.split("\n")) {
    const m = /^([a-z_]+): (.*)$/.exec(line);
    if (m) fields.set(m[1]!, m[2]!);
  }
  return fields;
}
