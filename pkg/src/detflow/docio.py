"""File formats: workflow documents, state files, mock transcripts, DOT.

A workflow document is canonical JSON whose "graph" member is exactly the
graph's canonical object, so the document hash and the in-memory graph hash
are the same string by construction. Tool bindings map the tool names used
by nodes either to built-ins or to foreign callables served over a local
HTTP bridge; foreign bindings carry their schemas inline so a document can
be validated without the host process that implements them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import httpx

from .errors import (
    DuplicateEdgeId,
    DuplicateNodeId,
    InvalidEdgeSpec,
    InvalidNodeSpec,
    ParseFailure,
    SelfLoop,
    ToolFailed,
    UnknownNode,
    ValidationFailed,
)
from .graph import (
    AgentSpec,
    AggregateSpec,
    BranchSpec,
    FanOutSpec,
    Guard,
    NodeKind,
    SubgraphDef,
    SubgraphSpec,
    ToolSpec,
    WorkflowGraph,
    retry_from_obj,
    validate,
)
from .memory import ConnectorHub, StateSnapshot, default_hub
from .nodes import ToolRegistry, default_tool_registry
from .providers import ProviderResponse, ToolCallRequest
from .values import (
    CanonicalDecodeError,
    PlainDecodeError,
    Schema,
    Value,
    canonical_json_bytes,
    canonical_obj,
    from_plain,
    schema_descriptor,
    schema_from_descriptor,
    value_from_canonical_obj,
)

FORMAT_TAG = "detflow/1"

# construction errors a malformed document can trigger; all surface as ParseFailure
_BUILD_ERRORS = (DuplicateEdgeId, DuplicateNodeId, InvalidEdgeSpec, InvalidNodeSpec, SelfLoop, UnknownNode)


# --- node / edge parsing (inverse of the canonical encoders) ---------------------------


def node_from_obj(obj: dict, where: str) -> NodeKind:
    try:
        kind = obj["kind"]
        if kind == "agent":
            return AgentSpec(
                system_prompt=str(obj["system_prompt"]),
                input_schema=schema_from_descriptor(obj["input"]),
                output_schema=schema_from_descriptor(obj["output"]),
                tool_refs=frozenset(str(t) for t in obj["tools"]),
                declared_state_reads=frozenset(str(k) for k in obj["state_reads"]),
                max_iterations=int(obj["max_iterations"]),
            )
        if kind == "tool":
            return ToolSpec(
                fn_ref=str(obj["tool"]),
                input_schema=schema_from_descriptor(obj["input"]),
                output_schema=schema_from_descriptor(obj["output"]),
                timeout_ms=int(obj["timeout_ms"]),
                retry=retry_from_obj(obj["retry"]),
            )
        if kind == "branch":
            return BranchSpec(
                schema=schema_from_descriptor(obj["schema"]),
                guards=tuple(Guard(str(g["edge"]), str(g["when"])) for g in obj["guards"]),
            )
        if kind == "fanout":
            return FanOutSpec(schema=schema_from_descriptor(obj["schema"]))
        if kind == "aggregate":
            return AggregateSpec(policy=str(obj["policy"]))
        if kind == "subgraph":
            return SubgraphSpec(
                definition=SubgraphDef(
                    name=str(obj["name"]),
                    graph=graph_from_obj(obj["graph"], f"{where}.graph"),
                    input_bindings=tuple(sorted((str(k), str(v)) for k, v in obj["inputs"].items())),
                    output_bindings=tuple(sorted((str(k), str(v)) for k, v in obj["outputs"].items())),
                )
            )
        raise ParseFailure(f"{where}: unknown node kind {kind!r}")
    except ParseFailure:
        raise
    except (KeyError, TypeError, ValueError, CanonicalDecodeError, *_BUILD_ERRORS) as exc:
        raise ParseFailure(f"{where}: {exc}") from exc


def graph_from_obj(obj: dict, where: str = "graph") -> WorkflowGraph:
    try:
        g = WorkflowGraph(str(obj["name"]), str(obj["version"]))
        for node_id in sorted(obj["nodes"]):
            g.add(node_id, node_from_obj(obj["nodes"][node_id], f"{where}.nodes.{node_id}"))
        for edge_id in sorted(obj["edges"]):
            e = obj["edges"][edge_id]
            fmap = e["map"]
            g.connect(
                str(e["src"]),
                str(e["dst"]),
                transform=None if e["transform"] is None else str(e["transform"]),
                field_map=None if fmap is None else {str(k): str(v) for k, v in fmap.items()},
                edge_id=edge_id,
            )
        return g
    except ParseFailure:
        raise
    except (KeyError, TypeError, ValueError, *_BUILD_ERRORS) as exc:
        raise ParseFailure(f"{where}: {exc}") from exc


# --- tool bindings ----------------------------------------------------------------------


@dataclass(frozen=True)
class ToolBinding:
    kind: str  # "builtin" | "foreign"
    name: str
    input_schema: Schema | None = None
    output_schema: Schema | None = None

    def to_obj(self) -> dict:
        if self.kind == "builtin":
            return {"builtin": self.name}
        return {
            "foreign": self.name,
            "input": schema_descriptor(self.input_schema or Schema()),
            "output": schema_descriptor(self.output_schema or Schema()),
        }

    @classmethod
    def from_obj(cls, obj: dict, where: str) -> "ToolBinding":
        if "builtin" in obj:
            return cls("builtin", str(obj["builtin"]))
        if "foreign" in obj:
            try:
                return cls(
                    "foreign",
                    str(obj["foreign"]),
                    schema_from_descriptor(obj["input"]),
                    schema_from_descriptor(obj["output"]),
                )
            except (KeyError, CanonicalDecodeError) as exc:
                raise ParseFailure(f"{where}: {exc}") from exc
        raise ParseFailure(f"{where}: binding must name a builtin or a foreign tool")


def _foreign_proxy(server_url: str, name: str, timeout_ms: int):
    url = server_url.rstrip("/") + "/invoke"

    def call(args: Value) -> Value:
        try:
            resp = httpx.post(url, json={"tool": name, "args": canonical_obj(args)}, timeout=timeout_ms / 1000.0)
        except httpx.HTTPError as exc:
            raise ToolFailed(f"tool server unreachable: {exc}") from exc
        if resp.status_code != 200:
            detail = ""
            try:
                detail = resp.json().get("error", "")
            except ValueError:
                detail = resp.text[:200]
            raise ToolFailed(f"foreign tool {name!r} failed: {detail or resp.status_code}")
        try:
            return value_from_canonical_obj(resp.json()["result"])
        except (ValueError, KeyError, CanonicalDecodeError) as exc:
            raise ToolFailed(f"foreign tool {name!r} returned a malformed result: {exc}") from exc

    return call


def _foreign_stub(name: str):
    def call(_: Value) -> Value:
        raise ToolFailed(f"foreign tool {name!r} requires a tool server (--tool-server)")

    return call


def build_tool_registry(
    bindings: dict[str, ToolBinding],
    *,
    hub: ConnectorHub | None = None,
    tool_server: str | None = None,
    foreign_timeout_ms: int = 30_000,
) -> ToolRegistry:
    """Registry for a document: explicit bindings first, then every builtin
    name that is still free. Foreign tools become HTTP proxies when a tool
    server is given, otherwise stubs that fail if actually invoked (which
    still lets validation resolve their schemas)."""
    builtins = default_tool_registry(hub if hub is not None else default_hub())
    reg = ToolRegistry()
    for ref in sorted(bindings):
        b = bindings[ref]
        if b.kind == "builtin":
            entry = builtins.get(b.name)
            reg.register(ref, entry.fn, entry.input_schema, entry.output_schema, timeout_ms=entry.timeout_ms, description=entry.description)
        else:
            fn = _foreign_proxy(tool_server, b.name, foreign_timeout_ms) if tool_server else _foreign_stub(b.name)
            reg.register(ref, fn, b.input_schema or Schema(), b.output_schema or Schema(), timeout_ms=foreign_timeout_ms)
    for name in builtins.names():
        if not reg.has(name):
            entry = builtins.get(name)
            reg.register(name, entry.fn, entry.input_schema, entry.output_schema, timeout_ms=entry.timeout_ms, description=entry.description)
    return reg


# --- workflow documents --------------------------------------------------------------------


@dataclass
class WorkflowDocument:
    graph: WorkflowGraph
    entry_schema: Schema = dc_field(default_factory=Schema)
    tools: dict[str, ToolBinding] = dc_field(default_factory=dict)
    provider: dict | None = None

    def to_obj(self) -> dict:
        obj = {
            "format": FORMAT_TAG,
            "graph": self.graph.canonical_obj(),
            "entry_state": schema_descriptor(self.entry_schema),
            "tools": {ref: b.to_obj() for ref, b in sorted(self.tools.items())},
        }
        if self.provider is not None:
            obj["provider"] = self.provider
        return obj

    def to_bytes(self) -> bytes:
        return canonical_json_bytes(self.to_obj())

    def hash(self) -> str:
        return self.graph.canonical_hash()

    @classmethod
    def from_obj(cls, obj: dict) -> "WorkflowDocument":
        if not isinstance(obj, dict):
            raise ParseFailure("document root must be an object")
        if obj.get("format") != FORMAT_TAG:
            raise ParseFailure(f"unsupported format tag {obj.get('format')!r}, expected {FORMAT_TAG!r}")
        for member in ("graph", "entry_state", "tools"):
            if member not in obj:
                raise ParseFailure(f"document is missing {member!r}")
        graph = graph_from_obj(obj["graph"])
        try:
            entry = schema_from_descriptor(obj["entry_state"])
        except CanonicalDecodeError as exc:
            raise ParseFailure(f"entry_state: {exc}") from exc
        tools = {str(ref): ToolBinding.from_obj(b, f"tools.{ref}") for ref, b in obj["tools"].items()}
        provider = obj.get("provider")
        if provider is not None and not isinstance(provider, dict):
            raise ParseFailure("provider must be an object")
        return cls(graph=graph, entry_schema=entry, tools=tools, provider=provider)


def save_workflow(
    graph: WorkflowGraph,
    path: str,
    *,
    entry_schema: Schema | None = None,
    tools: dict[str, ToolBinding] | None = None,
    provider: dict | None = None,
) -> WorkflowDocument:
    doc = WorkflowDocument(graph, entry_schema or Schema(), dict(tools or {}), provider)
    with open(path, "wb") as fh:
        fh.write(doc.to_bytes())
        fh.write(b"\n")
    return doc


def load_workflow(path: str, *, check: bool = True, tool_server: str | None = None) -> WorkflowDocument:
    """Parse and (by default) validate a workflow document.

    Raises ParseFailure for malformed files and ValidationFailed (report
    attached) for well-formed documents describing a non-executable graph.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        obj = json.loads(raw)
    except ValueError as exc:
        lineno = getattr(exc, "lineno", None)
        raise ParseFailure(str(exc), line=lineno) from exc
    doc = WorkflowDocument.from_obj(obj)
    if check:
        registry = build_tool_registry(doc.tools, tool_server=tool_server)
        report = validate(doc.graph, tools=registry, entry_state=doc.entry_schema)
        if not report.ok:
            raise ValidationFailed(report)
    return doc


# --- state files -------------------------------------------------------------------------


def load_state(path: str, entry_schema: Schema) -> dict[str, Value]:
    """Initial-state file: a flat JSON object of plain values, decoded
    strictly against the document's entry-state schema."""
    with open(path, "rb") as fh:
        try:
            obj = json.load(fh)
        except ValueError as exc:
            raise ParseFailure(f"state file: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseFailure("state file must be a JSON object")
    out: dict[str, Value] = {}
    for key in sorted(obj):
        ftype = entry_schema.get(key)
        if ftype is None:
            raise ParseFailure(f"state file key {key!r} is not in the entry-state schema")
        try:
            out[key] = from_plain(obj[key], ftype, key)
        except PlainDecodeError as exc:
            raise ParseFailure(str(exc)) from exc
    return out


def state_file_bytes(snapshot: StateSnapshot) -> bytes:
    """Final-state file: canonical, so equal runs produce equal bytes."""
    return canonical_json_bytes(
        {
            "logical_time": snapshot.logical_time,
            "values": {key: canonical_obj(value) for key, value in snapshot.as_dict().items()},
        }
    )


def save_state_file(snapshot: StateSnapshot, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(state_file_bytes(snapshot))
        fh.write(b"\n")


# --- mock transcripts ----------------------------------------------------------------------


def load_transcript(path: str) -> dict[tuple[str, int], ProviderResponse]:
    """Scripted mock-provider responses, keyed by (node id, iteration)."""
    with open(path, "rb") as fh:
        try:
            obj = json.load(fh)
        except ValueError as exc:
            raise ParseFailure(f"transcript: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("responses"), list):
        raise ParseFailure('transcript must be {"responses": [...]}')
    script: dict[tuple[str, int], ProviderResponse] = {}
    for i, entry in enumerate(obj["responses"]):
        where = f"responses[{i}]"
        try:
            key = (str(entry["node"]), int(entry["iteration"]))
            if key in script:
                raise ParseFailure(f"{where}: duplicate (node, iteration) {key!r}")
            if "final" in entry:
                script[key] = ProviderResponse(final_text=str(entry["final"]))
            else:
                calls = []
                for c in entry["tool_calls"]:
                    args = None if c.get("args") is None else value_from_canonical_obj(c["args"])
                    calls.append(ToolCallRequest(str(c["name"]), args, str(c.get("args_text", ""))))
                script[key] = ProviderResponse(tool_calls=tuple(calls))
        except ParseFailure:
            raise
        except (KeyError, TypeError, ValueError, CanonicalDecodeError) as exc:
            raise ParseFailure(f"{where}: {exc}") from exc
    return script


def save_transcript(script: dict[tuple[str, int], ProviderResponse], path: str) -> None:
    responses = []
    for (node, iteration), resp in sorted(script.items()):
        entry: dict = {"node": node, "iteration": iteration}
        if resp.final_text is not None:
            entry["final"] = resp.final_text
        else:
            entry["tool_calls"] = [
                {
                    "name": c.name,
                    "args": None if c.args is None else canonical_obj(c.args),
                    "args_text": c.args_text,
                }
                for c in resp.tool_calls or ()
            ]
        responses.append(entry)
    with open(path, "wb") as fh:
        fh.write(canonical_json_bytes({"responses": responses}))
        fh.write(b"\n")


# --- DOT export ------------------------------------------------------------------------------


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def export_dot(graph: WorkflowGraph) -> str:
    """Graphviz text: nodes labeled with their kind, branch edges labeled
    with their guard source."""
    guard_text: dict[str, str] = {}
    for node in graph.nodes.values():
        if isinstance(node.spec, BranchSpec):
            for g in node.spec.guards:
                guard_text[g.edge_id] = g.source
    lines = [f'digraph "{_dot_escape(graph.name)}" {{']
    for node_id in sorted(graph.nodes):
        kind = graph.nodes[node_id].kind
        lines.append(f'  "{_dot_escape(node_id)}" [label="{_dot_escape(node_id)}\\n({kind})"];')
    for edge_id in sorted(graph.edges):
        e = graph.edges[edge_id]
        attrs = ""
        if edge_id in guard_text:
            attrs = f' [label="{_dot_escape(guard_text[edge_id])}"]'
        lines.append(f'  "{_dot_escape(e.src)}" -> "{_dot_escape(e.dst)}"{attrs};')
    lines.append("}")
    return "\n".join(lines) + "\n"
