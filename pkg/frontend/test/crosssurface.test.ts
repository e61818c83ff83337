import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";
import { invokeSync } from "../src/cli.js";
import {
  FIRST_AVAILABLE,
  Schema,
  V,
  Workflow,
  finalResponse,
  loadWorkflow,
  run,
  workflow,
  type TranscriptEntry,
} from "../src/index.js";

const MIRROR = fileURLToPath(new URL("./fixtures/triage.flow.json", import.meta.url));

const ticket = new Schema({ n: "int" });
const verdict = new Schema({ verdict: "string" });

/** The same workflow the fixture file describes, written with the builder. */
function buildTriage(): Workflow {
  return workflow("triage")
    .agent("intake", {
      systemPrompt: "Classify the ticket and extract a severity number.",
      input: ticket,
      output: ticket,
    })
    .branch("route", {
      schema: ticket,
      guards: [
        { edge: "hot", when: "route.n >= 10" },
        { edge: "cold", when: "true" },
      ],
    })
    .agent("hot_path", { systemPrompt: "Handle the urgent ticket.", input: ticket, output: verdict })
    .agent("cold_path", { systemPrompt: "Queue the routine ticket.", input: ticket, output: verdict })
    .aggregate("merge", FIRST_AVAILABLE)
    .tool("wrap", { tool: "noop", input: new Schema(), output: new Schema() })
    .connect("intake", "route")
    .connect("route", "hot_path", { edgeId: "hot" })
    .connect("route", "cold_path", { edgeId: "cold" })
    .connect("hot_path", "merge")
    .connect("cold_path", "merge")
    .connect("merge", "wrap", { fieldMap: {} })
    .entryState(ticket)
    .build();
}

const script: TranscriptEntry[] = [
  finalResponse("intake", 1, V.record({ n: V.int(12) })),
  finalResponse("hot_path", 1, V.record({ verdict: V.string("page") })),
];

describe("one workflow, two authoring surfaces", () => {
  it("hashes identically whether built fluently or loaded from a file", () => {
    const built = buildTriage();
    const loaded = loadWorkflow(MIRROR);
    expect(built.hash()).toBe(loaded.hash());

    const res = invokeSync(["hash", MIRROR]);
    expect(res.code).toBe(0);
    expect(res.stdout.trim()).toBe(built.hash());
  });

  it("executes identically under the same script and initial state", async () => {
    const started = Date.now();
    const initialState = { n: V.int(5) };

    const fromBuilder = await run(buildTriage(), {
      provider: "mock",
      transcript: script,
      initialState,
    });
    const fromFile = await run(MIRROR, {
      provider: "mock",
      transcript: script,
      initialState,
    });

    expect(fromBuilder.status).toBe("ok");
    expect(fromFile.status).toBe("ok");
    expect(fromBuilder.graphHash).toBe(fromFile.graphHash);
    expect(fromBuilder.traceDigest).toBe(fromFile.traceDigest);
    expect(fromBuilder.stateBytes.equals(fromFile.stateBytes)).toBe(true);
    expect(fromBuilder.logicalTime).toBe(fromFile.logicalTime);

    const merged = fromBuilder.finalState.get("merge");
    expect(merged).toBeDefined();
    expect(merged!.t).toBe("record");
    if (merged!.t === "record") {
      expect(merged!.v.get("verdict")).toEqual(V.string("page"));
    }

    expect(Date.now() - started).toBeLessThan(120_000);
  });
});
