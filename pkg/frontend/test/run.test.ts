import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, describe, expect, it } from "vitest";
import { ExecutionFailed, SchemaViolation } from "../src/errors.js";
import { Schema, V, Workflow, finalResponse, resume, run, workflow, type TranscriptEntry } from "../src/index.js";

const TRIAGE = fileURLToPath(new URL("./fixtures/triage.flow.json", import.meta.url));

const scratch = mkdtempSync(join(tmpdir(), "detflow-run-test-"));
afterAll(() => rmSync(scratch, { recursive: true, force: true }));

const script: TranscriptEntry[] = [
  finalResponse("intake", 1, V.record({ n: V.int(12) })),
  finalResponse("hot_path", 1, V.record({ verdict: V.string("page") })),
];

describe("initial state checking", () => {
  // A bin that cannot exist: if the client ever spawned it, the error would
  // be EngineNotFound instead of the schema violation we expect.
  const noSpawn = { bin: join(scratch, "missing-engine") };

  it("rejects a key outside the entry schema before spawning anything", async () => {
    await expect(
      run(TRIAGE, { ...noSpawn, initialState: { zzz: V.int(1) } }),
    ).rejects.toThrow(SchemaViolation);
    await expect(run(TRIAGE, { ...noSpawn, initialState: { zzz: V.int(1) } })).rejects.toThrow(
      /not in the entry-state schema/,
    );
  });

  it("rejects a type mismatch before spawning anything", async () => {
    await expect(run(TRIAGE, { ...noSpawn, initialState: { n: V.string("five") } })).rejects.toThrow(
      /n: expected int, got string/,
    );
  });
});

describe("running workflows", () => {
  it("accepts a file path and returns typed state plus metrics", async () => {
    const metricsOut = join(scratch, "metrics.txt");
    const res = await run(TRIAGE, {
      provider: "mock",
      transcript: script,
      initialState: { n: V.int(5) },
      metricsOut,
    });
    expect(res.status).toBe("ok");
    expect(res.graphHash).toMatch(/^[0-9a-f]{64}$/);
    expect(res.traceDigest).toMatch(/^[0-9a-f]{64}$/);
    expect(res.finalState.get("intake")).toEqual(V.record({ n: V.int(12) }));
    expect(res.metrics).not.toBeNull();
    expect(typeof res.metrics).toBe("object");
  });

  it("resumes from a checkpoint and converges on the same final state bytes", async () => {
    const ckpt = join(scratch, "triage.ckpt.json");
    const full = await run(TRIAGE, { provider: "mock", transcript: script, initialState: { n: V.int(5) } });

    const stopped = await run(TRIAGE, {
      provider: "mock",
      transcript: script,
      initialState: { n: V.int(5) },
      checkpointPath: ckpt,
      stopAfterCommits: 2,
    });
    expect(stopped.status).toBe("stopped");

    const resumed = await resume(ckpt, TRIAGE, { provider: "mock", transcript: script });
    expect(resumed.status).toBe("ok");
    expect(resumed.stateBytes.equals(full.stateBytes)).toBe(true);
    expect(resumed.finalState.get("merge")).toEqual(V.record({ verdict: V.string("page") }));
  });
});

describe("execution failures", () => {
  function gateWorkflow(): Workflow {
    return workflow("gatecheck")
      .branch("gate", { schema: { n: "int" }, guards: [{ edge: "big", when: "gate.n >= 100" }] })
      .agent("sink", { systemPrompt: "s", input: { n: "int" }, output: { ok: "bool" } })
      .connect("gate", "sink", { edgeId: "big" })
      .entryState(new Schema({ n: "int" }))
      .build();
  }

  it("carries the failing node and the partial trace digest", async () => {
    let caught: unknown;
    try {
      await run(gateWorkflow(), { provider: "mock", initialState: { n: V.int(5) } });
    } catch (exc) {
      caught = exc;
    }
    expect(caught).toBeInstanceOf(ExecutionFailed);
    const failure = caught as ExecutionFailed;
    expect(failure.nodeId).toBe("gate");
    expect(failure.message).toMatch(/no guard matched at branch 'gate'/);
    expect(failure.graphHash).toMatch(/^[0-9a-f]{64}$/);
    expect(failure.traceDigest).toMatch(/^[0-9a-f]{64}$/);
  });
});
