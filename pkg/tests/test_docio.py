"""Document and file-format handling: workflow files, tool bindings, state
files, transcripts, and the DOT export. The main property under test is that
save -> load -> save is byte-identical and hash-preserving."""

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from detflow.docio import (
    ToolBinding,
    WorkflowDocument,
    build_tool_registry,
    export_dot,
    graph_from_obj,
    load_state,
    load_transcript,
    load_workflow,
    node_from_obj,
    save_state_file,
    save_transcript,
    save_workflow,
    state_file_bytes,
)
from detflow.engine import ExecutionConfig, execute
from detflow.errors import ParseFailure, ToolFailed, ValidationFailed
from detflow.graph import (
    FIRST_AVAILABLE,
    REQUIRE_ALL,
    AgentSpec,
    AggregateSpec,
    BranchSpec,
    FanOutSpec,
    Guard,
    SubgraphDef,
    SubgraphSpec,
    ToolSpec,
    WorkflowGraph,
    encapsulate,
    node_canonical_obj,
)
from detflow.providers import MockProvider, ProviderResponse, ToolCallRequest, final
from detflow.recovery import FailFast, Retry
from detflow.values import (
    INT,
    STRING,
    Schema,
    Value,
    canonical_obj,
    value_from_canonical_obj,
)

IO = Schema({"n": INT})


def demo_graph() -> WorkflowGraph:
    g = WorkflowGraph("demo", version="2")
    g.add("plan", AgentSpec("plan it", IO, IO, tool_refs=frozenset({"add"})))
    g.add("gate", BranchSpec(IO, guards=(Guard("big", "gate.n > 5"), Guard("rest", "true"))))
    g.add("heavy", ToolSpec("sleep_ms", Schema({"ms": INT}), Schema({"slept_ms": INT}), timeout_ms=2000))
    g.add("light", ToolSpec("noop", Schema(), Schema(), retry=Retry(max_attempts=2, base_delay_ms=5, cap_ms=5)))
    g.add("adder", ToolSpec("add", Schema({"a": INT, "b": INT}), Schema({"sum": INT})))
    g.add("done", AggregateSpec(FIRST_AVAILABLE))
    g.connect("plan", "gate")
    g.connect("plan", "adder", field_map=[("n", "a")])
    g.connect("plan", "adder", field_map=[("n", "b")])
    g.connect("gate", "heavy", edge_id="big", field_map=[("n", "ms")])
    g.connect("gate", "light", edge_id="rest", field_map=[])
    g.connect("heavy", "done", field_map=[])
    g.connect("light", "done")
    return g


# --- document round-trips ------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    path = str(tmp_path / "wf.json")
    doc = save_workflow(
        demo_graph(),
        path,
        entry_schema=IO,
        tools={"add": ToolBinding("builtin", "add")},
        provider={"kind": "mock"},
    )
    loaded = load_workflow(path)
    assert loaded.to_bytes() == doc.to_bytes()
    assert loaded.hash() == doc.hash() == demo_graph().canonical_hash()
    assert loaded.entry_schema == IO
    assert loaded.provider == {"kind": "mock"}
    assert loaded.tools["add"] == ToolBinding("builtin", "add")


def test_document_hash_is_graph_hash(tmp_path):
    path = str(tmp_path / "wf.json")
    doc = save_workflow(demo_graph(), path, entry_schema=IO)
    raw = json.loads(open(path, "rb").read())
    assert raw["format"] == "detflow/1"
    assert doc.hash() == graph_from_obj(raw["graph"]).canonical_hash()


def test_node_objects_are_strict_inverses():
    specs = [
        AgentSpec("p", IO, Schema({"s": STRING}), tool_refs=frozenset({"b", "a"}),
                  declared_state_reads=frozenset({"k"}), max_iterations=5),
        ToolSpec("add", Schema({"a": INT, "b": INT}), Schema({"sum": INT}),
                 timeout_ms=1234, retry=Retry(max_attempts=4, base_delay_ms=7, factor=1.5, cap_ms=99)),
        ToolSpec("noop", Schema(), Schema()),
        BranchSpec(IO, guards=(Guard("x", "n > 1"), Guard("y", "true"))),
        FanOutSpec(IO),
        AggregateSpec(REQUIRE_ALL),
        AggregateSpec(FIRST_AVAILABLE),
    ]
    for spec in specs:
        obj = node_canonical_obj(spec)
        assert node_from_obj(obj, "here") == spec


def test_subgraph_document_round_trip(tmp_path):
    flat = WorkflowGraph("flat")
    flat.add("a", ToolSpec("noop", Schema(), Schema()))
    flat.add("b", ToolSpec("noop", Schema(), Schema()))
    flat.add("c", ToolSpec("noop", Schema(), Schema()))
    flat.connect("a", "b")
    flat.connect("b", "c")
    host, _ = encapsulate(flat, {"b"}, name="boxed")
    path = str(tmp_path / "wf.json")
    doc = save_workflow(host, path, tools={"noop": ToolBinding("builtin", "noop")})
    loaded = load_workflow(path)
    assert loaded.to_bytes() == doc.to_bytes()
    spec = loaded.graph.nodes["boxed"].spec
    assert isinstance(spec, SubgraphSpec)
    assert spec.definition.name == "boxed"
    assert sorted(spec.definition.graph.nodes) == ["b"]


def random_document(rng: random.Random) -> WorkflowDocument:
    g = WorkflowGraph(f"rnd-{rng.randrange(10_000)}", version=str(rng.randrange(1, 9)))
    n = rng.randrange(1, 8)
    for i in range(n):
        roll = rng.random()
        if roll < 0.40:
            g.add(f"n{i}", ToolSpec(
                rng.choice(["noop", "add", "frob"]),
                Schema(), Schema(),
                timeout_ms=rng.choice([500, 30_000]),
                retry=rng.choice([FailFast(), Retry(max_attempts=rng.randrange(2, 5))]),
            ))
        elif roll < 0.75:
            g.add(f"n{i}", AgentSpec(
                f"prompt {rng.randrange(100)}",
                Schema(), Schema({"x": INT}),
                tool_refs=frozenset(rng.sample(["add", "noop", "frob"], rng.randrange(0, 3))),
                max_iterations=rng.randrange(1, 6),
            ))
        elif roll < 0.85:
            g.add(f"n{i}", FanOutSpec(Schema()))
        elif roll < 0.95:
            g.add(f"n{i}", BranchSpec(Schema({"x": INT}), guards=(Guard(f"g{i}", "true"),)))
        else:
            g.add(f"n{i}", AggregateSpec(rng.choice([REQUIRE_ALL, FIRST_AVAILABLE])))
    for j in range(1, n):
        for i in range(j):
            if rng.random() < 0.35:
                g.connect(f"n{i}", f"n{j}", field_map=rng.choice([None, []]))
    tools = {}
    if rng.random() < 0.5:
        tools["frob"] = ToolBinding("foreign", "frob", Schema({"x": INT}), Schema({"y": INT}))
    if rng.random() < 0.5:
        tools["add"] = ToolBinding("builtin", "add")
    provider = rng.choice([None, {"kind": "mock"}, {"kind": "http", "model": "m1"}])
    entry = rng.choice([Schema(), IO, Schema({"x": INT, "s": STRING})])
    return WorkflowDocument(g, entry, tools, provider)


def test_random_documents_round_trip_stably(tmp_path):
    rng = random.Random(20260814)
    for i in range(200):
        doc = random_document(rng)
        path = str(tmp_path / f"wf{i}.json")
        with open(path, "wb") as fh:
            fh.write(doc.to_bytes())
        loaded = load_workflow(path, check=False)
        assert loaded.to_bytes() == doc.to_bytes(), f"document {i} not byte-stable"
        assert loaded.hash() == doc.hash(), f"document {i} hash drifted"


# --- malformed documents --------------------------------------------------------------


def write(tmp_path, obj) -> str:
    path = str(tmp_path / "bad.json")
    with open(path, "w") as fh:
        if isinstance(obj, (bytes, str)):
            fh.write(obj if isinstance(obj, str) else obj.decode())
        else:
            json.dump(obj, fh)
    return path


def valid_obj() -> dict:
    return json.loads(WorkflowDocument(demo_graph(), IO, {"add": ToolBinding("builtin", "add")}).to_bytes())


def test_not_json_reports_line():
    with pytest.raises(ParseFailure) as exc_info:
        WorkflowDocument.from_obj("nope")  # type: ignore[arg-type]
    assert "object" in str(exc_info.value)


def test_malformed_json_rejected(tmp_path):
    path = write(tmp_path, '{"format": "detflow/1",\n  "graph": }')
    with pytest.raises(ParseFailure) as exc_info:
        load_workflow(path)
    assert exc_info.value.line == 2


@pytest.mark.parametrize(
    "mutate",
    [
        lambda o: o.__setitem__("format", "detflow/99"),
        lambda o: o.pop("format"),
        lambda o: o.pop("graph"),
        lambda o: o.pop("entry_state"),
        lambda o: o.pop("tools"),
        lambda o: o.__setitem__("provider", "mock"),
        lambda o: o["graph"]["nodes"]["plan"].__setitem__("kind", "alien"),
        lambda o: o["graph"]["nodes"]["plan"].pop("system_prompt"),
        lambda o: o["graph"]["nodes"]["heavy"].__setitem__("retry", {"kind": "retry"}),
        lambda o: o["graph"]["edges"]["plan->gate"].__setitem__("src", "ghost"),
        lambda o: o["graph"]["nodes"]["plan"].__setitem__("max_iterations", "three"),
        lambda o: o["tools"].__setitem__("add", {}),
        lambda o: o["tools"].__setitem__("add", {"foreign": "x"}),
        lambda o: o["entry_state"].__setitem__("n", {"t": "alien"}),
    ],
)
def test_structurally_bad_documents_rejected(tmp_path, mutate):
    obj = valid_obj()
    mutate(obj)
    with pytest.raises(ParseFailure):
        load_workflow(write(tmp_path, obj))


def test_unresolved_tool_fails_validation_on_load(tmp_path):
    g = WorkflowGraph()
    g.add("t", ToolSpec("no_such_tool", Schema(), Schema()))
    path = str(tmp_path / "wf.json")
    save_workflow(g, path)
    with pytest.raises(ValidationFailed) as exc_info:
        load_workflow(path)
    assert any(f.code == "UnresolvedToolRef" for f in exc_info.value.report.findings)
    # parse-only load still works
    assert load_workflow(path, check=False).graph.nodes["t"].spec.fn_ref == "no_such_tool"


# --- tool bindings and the registry -----------------------------------------------------


def test_builtin_binding_aliases_under_node_name():
    reg = build_tool_registry({"mysum": ToolBinding("builtin", "add")})
    entry = reg.get("mysum")
    out = entry.fn(Value.of_record({"a": Value.of_int(2), "b": Value.of_int(3)}))
    assert out.field("sum").payload == 5
    # unbound builtins remain reachable by their own names
    assert reg.has("add") and reg.has("noop") and reg.has("sleep_ms")


def test_foreign_binding_without_server_resolves_but_fails_on_call():
    bindings = {"frob": ToolBinding("foreign", "frob", Schema({"x": INT}), Schema({"y": INT}))}
    reg = build_tool_registry(bindings)
    assert reg.schemas("frob") == (Schema({"x": INT}), Schema({"y": INT}))
    with pytest.raises(ToolFailed) as exc_info:
        reg.get("frob").fn(Value.of_record({"x": Value.of_int(1)}))
    assert "tool server" in str(exc_info.value)


def test_binding_may_shadow_builtin_name():
    bindings = {"add": ToolBinding("foreign", "remote_add", Schema({"q": INT}), Schema({"r": INT}))}
    reg = build_tool_registry(bindings)
    assert reg.schemas("add") == (Schema({"q": INT}), Schema({"r": INT}))


# --- foreign tools over HTTP -------------------------------------------------------------


class _ToolHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        if self.path != "/invoke":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length))
        name = body["tool"]
        if name == "twice":
            args = value_from_canonical_obj(body["args"])
            result = Value.of_record({"out": Value.of_int(args.field("n").payload * 2)})
            self._reply(200, {"result": canonical_obj(result)})
        elif name == "broken_payload":
            self._reply(200, {"result": {"t": "int", "v": 12}})  # int payload must be a string
        else:
            self._reply(500, {"error": f"no tool named {name}"})

    def _reply(self, status: int, obj: dict):
        payload = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def tool_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ToolHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join()


def test_foreign_tool_roundtrip_over_http(tool_server):
    bindings = {"twice": ToolBinding("foreign", "twice", Schema({"n": INT}), Schema({"out": INT}))}
    reg = build_tool_registry(bindings, tool_server=tool_server)
    out = reg.get("twice").fn(Value.of_record({"n": Value.of_int(21)}))
    assert out == Value.of_record({"out": Value.of_int(42)})


def test_foreign_tool_drives_a_whole_run(tool_server):
    g = WorkflowGraph("remote")
    g.add("dbl", ToolSpec("twice", Schema({"n": INT}), Schema({"out": INT})))
    g.add("dbl2", ToolSpec("twice", Schema({"n": INT}), Schema({"out": INT})))
    g.connect("dbl", "dbl2", field_map=[("out", "n")])
    bindings = {"twice": ToolBinding("foreign", "twice", Schema({"n": INT}), Schema({"out": INT}))}
    reg = build_tool_registry(bindings, tool_server=tool_server)
    result = execute(g, {"n": Value.of_int(3)}, ExecutionConfig(), tools=reg)
    assert result.final_state()["dbl2"] == Value.of_record({"out": Value.of_int(12)})


def test_foreign_tool_error_surfaces_as_tool_failure(tool_server):
    bindings = {"missing": ToolBinding("foreign", "missing", Schema(), Schema())}
    reg = build_tool_registry(bindings, tool_server=tool_server)
    with pytest.raises(ToolFailed) as exc_info:
        reg.get("missing").fn(Value.of_record({}))
    assert "no tool named missing" in str(exc_info.value)


def test_foreign_tool_malformed_result_rejected(tool_server):
    bindings = {"broken_payload": ToolBinding("foreign", "broken_payload", Schema(), Schema({"out": INT}))}
    reg = build_tool_registry(bindings, tool_server=tool_server)
    with pytest.raises(ToolFailed) as exc_info:
        reg.get("broken_payload").fn(Value.of_record({}))
    assert "malformed result" in str(exc_info.value)


def test_unreachable_tool_server_is_a_tool_failure():
    bindings = {"twice": ToolBinding("foreign", "twice", Schema({"n": INT}), Schema({"out": INT}))}
    reg = build_tool_registry(bindings, tool_server="http://127.0.0.1:1", foreign_timeout_ms=300)
    with pytest.raises(ToolFailed) as exc_info:
        reg.get("twice").fn(Value.of_record({"n": Value.of_int(1)}))
    assert "unreachable" in str(exc_info.value)


# --- state files --------------------------------------------------------------------------


def test_load_state_decodes_against_entry_schema(tmp_path):
    path = write(tmp_path, {"n": 5, "s": "hello"})
    out = load_state(path, Schema({"n": INT, "s": STRING}))
    assert out == {"n": Value.of_int(5), "s": Value.of_string("hello")}


@pytest.mark.parametrize(
    "payload",
    [
        {"unknown": 1},
        {"n": "five"},
        {"n": 1.5},
        {"n": True},
        [1, 2],
        '{"n":',
    ],
)
def test_load_state_rejects_bad_input(tmp_path, payload):
    path = write(tmp_path, payload)
    with pytest.raises(ParseFailure):
        load_state(path, IO)


def test_final_state_file_bytes_are_run_invariant(tmp_path):
    def one_run():
        g = WorkflowGraph("small")
        g.add("t", ToolSpec("add", Schema({"a": INT, "b": INT}), Schema({"sum": INT})))
        return execute(g, {"a": Value.of_int(1), "b": Value.of_int(2)}, ExecutionConfig(worker_limit=4))

    a, b = one_run(), one_run()
    assert state_file_bytes(a.snapshot) == state_file_bytes(b.snapshot)
    path = str(tmp_path / "state.json")
    save_state_file(a.snapshot, path)
    obj = json.loads(open(path, "rb").read())
    assert obj["logical_time"] == a.snapshot.logical_time
    assert value_from_canonical_obj(obj["values"]["t"]) == Value.of_record({"sum": Value.of_int(3)})


# --- transcripts ---------------------------------------------------------------------------


def test_transcript_round_trip(tmp_path):
    script = {
        ("a", 1): ProviderResponse(tool_calls=(
            ToolCallRequest("add", Value.of_record({"a": Value.of_int(1), "b": Value.of_int(2)})),
            ToolCallRequest("mystery", None, args_text="{broken"),
        )),
        ("a", 2): final('{"n": 3}'),
        ("b", 1): final('{"n": 0}'),
    }
    path = str(tmp_path / "transcript.json")
    save_transcript(script, path)
    loaded = load_transcript(path)
    assert loaded == script
    provider = MockProvider(script=loaded)
    assert provider.script[("a", 2)].final_text == '{"n": 3}'


@pytest.mark.parametrize(
    "obj",
    [
        {"responses": "x"},
        [],
        {"responses": [{"node": "a"}]},
        {"responses": [{"node": "a", "iteration": 1}]},
        {"responses": [{"node": "a", "iteration": 1, "tool_calls": [{"args": None}]}]},
        {"responses": [
            {"node": "a", "iteration": 1, "final": "x"},
            {"node": "a", "iteration": 1, "final": "y"},
        ]},
    ],
)
def test_malformed_transcripts_rejected(tmp_path, obj):
    path = write(tmp_path, obj)
    with pytest.raises(ParseFailure):
        load_transcript(path)


# --- DOT export ----------------------------------------------------------------------------


def test_export_dot_structure():
    dot = export_dot(demo_graph())
    assert dot.startswith('digraph "demo" {')
    assert dot.endswith("}\n")
    assert '"plan" [label="plan\\n(agent)"];' in dot
    assert '"gate" [label="gate\\n(branch)"];' in dot
    assert '"done" [label="done\\n(aggregate)"];' in dot
    assert '"plan" -> "gate";' in dot
    assert '"gate" -> "heavy" [label="gate.n > 5"];' in dot
    assert '"gate" -> "light" [label="true"];' in dot


def test_export_dot_escapes_quotes():
    g = WorkflowGraph('na"me')
    g.add("a", ToolSpec("noop", Schema(), Schema()))
    dot = export_dot(g)
    assert 'digraph "na\\"me" {' in dot
