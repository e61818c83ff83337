"""Typed workflow graphs: node specs, edges, validation, layering, hashing.

A workflow is a DAG of agent, tool, and control nodes joined by typed edges.
Edges carry an optional named transform plus a source-to-target field map;
validation proves every edge produces exactly the record slice its target
declares, so routing can never depend on runtime improvisation.

Graphs are mutable while being built and sealed by a successful validate();
the canonical hash is a pure function of (name, version, node set, edge set)
and is invariant under insertion order.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Union

from .errors import (
    CycleError,
    DuplicateEdgeId,
    DuplicateNodeId,
    EmptySubset,
    InvalidEdgeSpec,
    InvalidNodeSpec,
    NonConvexSubset,
    SealedGraph,
    SelfLoop,
    UnknownNode,
)
from .predicate import compile_guard, parse_source, state_keys, Literal
from .recovery import FailFast, RecoveryPolicy, Retry
from .values import (
    RecordOf,
    Schema,
    canonical_json_bytes,
    schema_descriptor,
    schema_from_descriptor,
)

REQUIRE_ALL = "require_all"
FIRST_AVAILABLE = "first_available"

DEFAULT_MAX_ITERATIONS = 3
DEFAULT_TOOL_TIMEOUT_MS = 30_000


# --- node kinds ---------------------------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    """A model-driven node: prompt in, schema-checked record out."""

    system_prompt: str
    input_schema: Schema
    output_schema: Schema
    tool_refs: frozenset[str] = frozenset()
    declared_state_reads: frozenset[str] = frozenset()
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidNodeSpec("max_iterations must be >= 1")
        object.__setattr__(self, "tool_refs", frozenset(self.tool_refs))
        object.__setattr__(self, "declared_state_reads", frozenset(self.declared_state_reads))


@dataclass(frozen=True)
class ToolSpec:
    """A deterministic function node executed natively with timeout/retry."""

    fn_ref: str
    input_schema: Schema
    output_schema: Schema
    timeout_ms: int = DEFAULT_TOOL_TIMEOUT_MS
    retry: RecoveryPolicy = FailFast()

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise InvalidNodeSpec("timeout_ms must be positive")


@dataclass(frozen=True)
class Guard:
    edge_id: str
    source: str  # predicate source text


@dataclass(frozen=True)
class BranchSpec:
    """Routes its input along the first out-edge whose guard is true.

    Guard order is semantic (first match wins); an always-true literal
    guard may appear once, last, as the default arm.
    """

    schema: Schema
    guards: tuple[Guard, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "guards", tuple(self.guards))


@dataclass(frozen=True)
class FanOutSpec:
    """Copies its input to every out-edge."""

    schema: Schema


@dataclass(frozen=True)
class AggregateSpec:
    """Joins inbound arms. require_all waits for every arm and emits a record
    keyed by in-edge id; first_available fires on the first completed arm and
    passes it through (all arms must share one schema)."""

    policy: str

    def __post_init__(self):
        if self.policy not in (REQUIRE_ALL, FIRST_AVAILABLE):
            raise InvalidNodeSpec(f"unknown aggregate policy {self.policy!r}")


@dataclass(frozen=True)
class SubgraphDef:
    """An encapsulated convex region. Bindings map host edge ids to the inner
    node each boundary edge originally touched."""

    name: str
    graph: "WorkflowGraph"
    input_bindings: tuple[tuple[str, str], ...]  # host edge id -> inner dst node
    output_bindings: tuple[tuple[str, str], ...]  # host edge id -> inner src node

    def input_binding(self, edge_id: str) -> str | None:
        return dict(self.input_bindings).get(edge_id)

    def output_binding(self, edge_id: str) -> str | None:
        return dict(self.output_bindings).get(edge_id)


@dataclass(frozen=True)
class SubgraphSpec:
    definition: SubgraphDef


NodeKind = Union[AgentSpec, ToolSpec, BranchSpec, FanOutSpec, AggregateSpec, SubgraphSpec]


@dataclass(frozen=True)
class Node:
    id: str
    spec: NodeKind

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise InvalidNodeSpec(f"node id must be a non-empty string, got {self.id!r}")

    @property
    def kind(self) -> str:
        return _KIND_NAMES[type(self.spec)]


_KIND_NAMES = {
    AgentSpec: "agent",
    ToolSpec: "tool",
    BranchSpec: "branch",
    FanOutSpec: "fanout",
    AggregateSpec: "aggregate",
    SubgraphSpec: "subgraph",
}


@dataclass(frozen=True)
class EdgeSpec:
    """A typed data edge. ``field_map`` maps source output fields to target
    input fields; None means identity (carry everything, same names) and an
    explicit empty map produces the empty record (pure sequencing)."""

    id: str
    src: str
    dst: str
    transform: str | None = None
    field_map: tuple[tuple[str, str], ...] | None = None

    def mapping(self) -> dict[str, str] | None:
        return None if self.field_map is None else dict(self.field_map)


def _normalize_map(field_map: Mapping[str, str] | Iterable[tuple[str, str]] | None) -> tuple[tuple[str, str], ...] | None:
    if field_map is None:
        return None
    items = list(field_map.items()) if isinstance(field_map, Mapping) else list(field_map)
    srcs = [s for s, _ in items]
    if len(set(srcs)) != len(srcs):
        # the serialized form is an object keyed by source field, so one
        # source field cannot feed two targets on a single edge; use a
        # second parallel edge for that
        dupes = sorted({s for s in srcs if srcs.count(s) > 1})
        raise InvalidEdgeSpec(f"field map uses source field(s) {', '.join(dupes)} more than once")
    return tuple(sorted(items))


# --- transforms ------------------------------------------------------------------


@dataclass(frozen=True)
class TransformDef:
    name: str
    input_schema: Schema
    output_schema: Schema
    fn: Callable


class TransformRegistry:
    """Named pure record-to-record functions usable on edges."""

    def __init__(self):
        self._defs: dict[str, TransformDef] = {}

    def register(self, name: str, input_schema: Schema, output_schema: Schema, fn: Callable) -> None:
        if name in self._defs:
            raise DuplicateEdgeId(f"transform {name!r} already registered")
        self._defs[name] = TransformDef(name, input_schema, output_schema, fn)

    def has(self, name: str) -> bool:
        return name in self._defs

    def get(self, name: str) -> TransformDef:
        return self._defs[name]


class ToolResolver(Protocol):
    """What validation needs from a tool registry."""

    def has(self, name: str) -> bool: ...

    def schemas(self, name: str) -> tuple[Schema, Schema]: ...


# --- graph -------------------------------------------------------------------------


class WorkflowGraph:
    """Mutable-until-sealed container of nodes and edges."""

    def __init__(self, name: str = "workflow", version: str = "1"):
        self.name = name
        self.version = version
        self.nodes: dict[str, Node] = {}
        self.edges: dict[str, EdgeSpec] = {}
        self._sealed = False
        self._hash_cache: str | None = None

    # -- construction --

    def _check_open(self) -> None:
        if self._sealed:
            raise SealedGraph("graph is sealed after successful validation")

    def add(self, node_id: str, spec: NodeKind) -> "WorkflowGraph":
        self._check_open()
        if node_id in self.nodes:
            raise DuplicateNodeId(f"node {node_id!r} already present")
        self.nodes[node_id] = Node(node_id, spec)
        self._hash_cache = None
        return self

    def connect(
        self,
        src: str,
        dst: str,
        *,
        transform: str | None = None,
        field_map: Mapping[str, str] | Iterable[tuple[str, str]] | None = None,
        edge_id: str | None = None,
    ) -> "WorkflowGraph":
        self._check_open()
        if src not in self.nodes:
            raise UnknownNode(f"unknown source node {src!r}")
        if dst not in self.nodes:
            raise UnknownNode(f"unknown target node {dst!r}")
        if src == dst:
            raise SelfLoop(f"self-loop on {src!r}")
        if edge_id is None:
            base = f"{src}->{dst}"
            edge_id = base
            k = 2
            while edge_id in self.edges:
                edge_id = f"{base}#{k}"
                k += 1
        elif edge_id in self.edges:
            raise DuplicateEdgeId(f"edge {edge_id!r} already present")
        self.edges[edge_id] = EdgeSpec(edge_id, src, dst, transform, _normalize_map(field_map))
        self._hash_cache = None
        return self

    # -- topology --

    def in_edges(self, node_id: str) -> list[EdgeSpec]:
        return sorted((e for e in self.edges.values() if e.dst == node_id), key=lambda e: e.id)

    def out_edges(self, node_id: str) -> list[EdgeSpec]:
        return sorted((e for e in self.edges.values() if e.src == node_id), key=lambda e: e.id)

    def entry_nodes(self) -> list[str]:
        with_in = {e.dst for e in self.edges.values()}
        return sorted(n for n in self.nodes if n not in with_in)

    def seal(self) -> None:
        self._sealed = True

    @property
    def sealed(self) -> bool:
        return self._sealed

    # -- canonical form --

    def canonical_obj(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "nodes": {nid: node_canonical_obj(n.spec) for nid, n in self.nodes.items()},
            "edges": {eid: edge_canonical_obj(e) for eid, e in self.edges.items()},
        }

    def canonical_hash(self) -> str:
        if self._sealed and self._hash_cache is not None:
            return self._hash_cache
        h = hashlib.sha256(canonical_json_bytes(self.canonical_obj())).hexdigest()
        if self._sealed:
            self._hash_cache = h
        return h


def retry_canonical_obj(policy: RecoveryPolicy) -> dict:
    if isinstance(policy, FailFast):
        return {"kind": "fail_fast"}
    return {
        "kind": "retry",
        "max_attempts": policy.max_attempts,
        "base_delay_ms": policy.base_delay_ms,
        "factor": policy.factor,
        "cap_ms": policy.cap_ms,
    }


def retry_from_obj(obj: dict) -> RecoveryPolicy:
    if obj.get("kind") == "fail_fast":
        return FailFast()
    return Retry(
        max_attempts=int(obj["max_attempts"]),
        base_delay_ms=int(obj["base_delay_ms"]),
        factor=float(obj["factor"]),
        cap_ms=int(obj["cap_ms"]),
    )


def node_canonical_obj(spec: NodeKind) -> dict:
    if isinstance(spec, AgentSpec):
        return {
            "kind": "agent",
            "system_prompt": spec.system_prompt,
            "input": schema_descriptor(spec.input_schema),
            "output": schema_descriptor(spec.output_schema),
            "tools": sorted(spec.tool_refs),
            "state_reads": sorted(spec.declared_state_reads),
            "max_iterations": spec.max_iterations,
        }
    if isinstance(spec, ToolSpec):
        return {
            "kind": "tool",
            "tool": spec.fn_ref,
            "input": schema_descriptor(spec.input_schema),
            "output": schema_descriptor(spec.output_schema),
            "timeout_ms": spec.timeout_ms,
            "retry": retry_canonical_obj(spec.retry),
        }
    if isinstance(spec, BranchSpec):
        return {
            "kind": "branch",
            "schema": schema_descriptor(spec.schema),
            "guards": [{"edge": g.edge_id, "when": g.source} for g in spec.guards],
        }
    if isinstance(spec, FanOutSpec):
        return {"kind": "fanout", "schema": schema_descriptor(spec.schema)}
    if isinstance(spec, AggregateSpec):
        return {"kind": "aggregate", "policy": spec.policy}
    if isinstance(spec, SubgraphSpec):
        d = spec.definition
        return {
            "kind": "subgraph",
            "name": d.name,
            "graph": d.graph.canonical_obj(),
            "inputs": dict(d.input_bindings),
            "outputs": dict(d.output_bindings),
        }
    raise InvalidNodeSpec(f"unknown node spec {spec!r}")


def edge_canonical_obj(e: EdgeSpec) -> dict:
    return {
        "src": e.src,
        "dst": e.dst,
        "transform": e.transform,
        "map": None if e.field_map is None else dict(e.field_map),
    }


# --- spec-level construction ops -----------------------------------------------


def add_node(graph: WorkflowGraph, node_id: str, spec: NodeKind) -> WorkflowGraph:
    return graph.add(node_id, spec)


def connect(
    graph: WorkflowGraph,
    src: str,
    dst: str,
    *,
    transform: str | None = None,
    field_map: Mapping[str, str] | None = None,
    edge_id: str | None = None,
) -> WorkflowGraph:
    return graph.connect(src, dst, transform=transform, field_map=field_map, edge_id=edge_id)


# --- ordering --------------------------------------------------------------------


def find_cycle(graph: WorkflowGraph) -> tuple[str, ...] | None:
    """Return the node ids of one cycle, or None for a DAG."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in graph.nodes}
    succ = {n: [] for n in graph.nodes}
    for e in graph.edges.values():
        succ[e.src].append(e.dst)
    for lst in succ.values():
        lst.sort()

    for start in sorted(graph.nodes):
        if color[start] != WHITE:
            continue
        stack: list[tuple[str, int]] = [(start, 0)]
        path = [start]
        color[start] = GRAY
        while stack:
            node, idx = stack[-1]
            if idx < len(succ[node]):
                stack[-1] = (node, idx + 1)
                nxt = succ[node][idx]
                if color[nxt] == GRAY:
                    i = path.index(nxt)
                    return tuple(path[i:])
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, 0))
                    path.append(nxt)
            else:
                color[node] = BLACK
                stack.pop()
                path.pop()
    return None


def layer_assignment(graph: WorkflowGraph) -> dict[str, int]:
    """layer(n) = 0 for entries, else 1 + max over predecessors.

    Raises CycleError when the graph is cyclic.
    """
    preds: dict[str, set[str]] = {n: set() for n in graph.nodes}
    succs: dict[str, set[str]] = {n: set() for n in graph.nodes}
    for e in graph.edges.values():
        preds[e.dst].add(e.src)
        succs[e.src].add(e.dst)
    indeg = {n: len(ps) for n, ps in preds.items()}

    layers: dict[str, int] = {}
    frontier = sorted(n for n, d in indeg.items() if d == 0)
    for n in frontier:
        layers[n] = 0
    queue = deque(frontier)
    done = 0
    while queue:
        n = queue.popleft()
        done += 1
        for s in sorted(succs[n]):
            indeg[s] -= 1
            if indeg[s] == 0:
                layers[s] = 1 + max(layers[p] for p in preds[s])
                queue.append(s)
    if done != len(graph.nodes):
        cyc = find_cycle(graph)
        raise CycleError(cyc if cyc else tuple(sorted(set(graph.nodes) - set(layers))))
    return layers


def topological_order(graph: WorkflowGraph) -> list[tuple[str, int]]:
    """(node id, layer) pairs ordered by (layer, id); the engine's ready
    order and commit order both derive from this."""
    layers = layer_assignment(graph)
    return sorted(((n, l) for n, l in layers.items()), key=lambda t: (t[1], t[0]))


# --- schema derivation --------------------------------------------------------------


def node_input_schema(node: Node) -> Schema | None:
    spec = node.spec
    if isinstance(spec, AgentSpec):
        return spec.input_schema
    if isinstance(spec, ToolSpec):
        return spec.input_schema
    if isinstance(spec, (BranchSpec, FanOutSpec)):
        return spec.schema
    return None  # aggregate: any arms; subgraph: via bindings


class SchemaDerivationError(Exception):
    """Internal: edge schema could not be derived; carries a finding."""

    def __init__(self, finding: "Finding"):
        super().__init__(finding.message)
        self.finding = finding


def produced_schema(
    graph: WorkflowGraph,
    edge: EdgeSpec,
    output_schemas: Mapping[str, Schema],
    transforms: TransformRegistry | None,
) -> Schema:
    src_schema = output_schemas[edge.src]
    if edge.transform is not None:
        if transforms is None or not transforms.has(edge.transform):
            raise SchemaDerivationError(
                Finding("UnresolvedTransform", "error", f"edge {edge.id!r} references unknown transform {edge.transform!r}", edge=edge.id)
            )
        tdef = transforms.get(edge.transform)
        if tdef.input_schema != src_schema:
            raise SchemaDerivationError(
                Finding(
                    "SchemaMismatch",
                    "error",
                    f"edge {edge.id!r}: transform {edge.transform!r} expects {tdef.input_schema!r}, source produces {src_schema!r}",
                    edge=edge.id,
                )
            )
        src_schema = tdef.output_schema
    if edge.field_map is None:
        return src_schema
    out: dict[str, object] = {}
    for src_f, dst_f in edge.field_map:
        t = src_schema.get(src_f)
        if t is None:
            raise SchemaDerivationError(
                Finding(
                    "SchemaMismatch",
                    "error",
                    f"edge {edge.id!r} maps missing source field {src_f!r}",
                    edge=edge.id,
                )
            )
        if dst_f in out:
            raise SchemaDerivationError(
                Finding("DuplicateTargetField", "error", f"edge {edge.id!r} maps target field {dst_f!r} twice", edge=edge.id)
            )
        out[dst_f] = t
    return Schema(out)  # type: ignore[arg-type]


def derive_output_schemas(
    graph: WorkflowGraph, transforms: TransformRegistry | None = None
) -> dict[str, Schema]:
    """Output schema per node, resolving aggregates from their in-edges.
    Requires an acyclic graph with no subgraph composites."""
    order = topological_order(graph)
    out: dict[str, Schema] = {}
    for node_id, _ in order:
        spec = graph.nodes[node_id].spec
        if isinstance(spec, AgentSpec):
            out[node_id] = spec.output_schema
        elif isinstance(spec, ToolSpec):
            out[node_id] = spec.output_schema
        elif isinstance(spec, (BranchSpec, FanOutSpec)):
            out[node_id] = spec.schema
        elif isinstance(spec, AggregateSpec):
            arms = {e.id: produced_schema(graph, e, out, transforms) for e in graph.in_edges(node_id)}
            if spec.policy == REQUIRE_ALL:
                out[node_id] = Schema({eid: RecordOf(s) for eid, s in arms.items()})
            else:
                schemas = list(arms.values())
                if not schemas:
                    raise SchemaDerivationError(
                        Finding("InvalidAggregate", "error", f"first_available aggregate {node_id!r} has no in-edges", node=node_id)
                    )
                first = schemas[0]
                for s in schemas[1:]:
                    if s != first:
                        raise SchemaDerivationError(
                            Finding(
                                "SchemaMismatch",
                                "error",
                                f"first_available aggregate {node_id!r} has mismatched arm schemas",
                                node=node_id,
                            )
                        )
                out[node_id] = first
        else:
            raise SchemaDerivationError(
                Finding("InvalidSubgraph", "error", f"composite node {node_id!r} must be inlined first", node=node_id)
            )
    return out


def state_schema_for(graph: WorkflowGraph, entry_state: Schema, transforms: TransformRegistry | None = None) -> Schema:
    """The full state-store schema a run of this graph can produce: the entry
    state plus each node's output record committed under its node id."""
    outs = derive_output_schemas(graph, transforms)
    merged = dict(entry_state.fields)
    for node_id, schema in outs.items():
        merged[node_id] = RecordOf(schema)
    return Schema(merged)


# --- validation -----------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    code: str
    severity: str  # "error" | "warning"
    message: str
    node: str | None = None
    edge: str | None = None

    def __str__(self) -> str:
        where = f" [{self.node or self.edge}]" if (self.node or self.edge) else ""
        return f"{self.severity}:{self.code}{where}: {self.message}"

    def to_obj(self) -> dict:
        return {
            "code": self.code,
            "severity": self.severity,
            "message": self.message,
            "node": self.node,
            "edge": self.edge,
        }


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors()

    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warning"]

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def to_obj(self) -> dict:
        return {"ok": self.ok, "findings": [f.to_obj() for f in self.findings]}


def validate(
    graph: WorkflowGraph,
    *,
    tools: ToolResolver | None = None,
    transforms: TransformRegistry | None = None,
    entry_state: Schema | None = None,
) -> ValidationReport:
    """Check executability. A graph is executable iff the report carries zero
    error-severity findings; success seals the graph against mutation."""
    entry_state = entry_state or Schema()
    report = ValidationReport()
    add = report.findings.append

    if not graph.nodes:
        add(Finding("EmptyGraph", "error", "graph has no nodes"))
        return report

    flat = graph
    if any(isinstance(n.spec, SubgraphSpec) for n in graph.nodes.values()):
        try:
            flat = inline(graph)
        except (UnknownNode, KeyError, DuplicateNodeId) as exc:
            add(Finding("InvalidSubgraph", "error", f"cannot inline composite nodes: {exc}"))
            return report

    # reachability warning (entries = nodes with no in-edges)
    entries = set(flat.entry_nodes())
    succs: dict[str, set[str]] = {n: set() for n in flat.nodes}
    for e in flat.edges.values():
        succs[e.src].add(e.dst)
    seen = set(entries)
    stack = list(entries)
    while stack:
        n = stack.pop()
        for s in succs[n]:
            if s not in seen:
                seen.add(s)
                stack.append(s)
    for n in sorted(set(flat.nodes) - seen):
        add(Finding("UnreachableNode", "warning", f"node {n!r} is unreachable from any entry node", node=n))

    cycle = find_cycle(flat)
    if cycle is not None:
        add(Finding("CycleDetected", "error", f"cycle through nodes: {', '.join(cycle)}", node=cycle[0]))

    # tool references resolve against the registry, schemas included
    for node_id, node in sorted(flat.nodes.items()):
        spec = node.spec
        if isinstance(spec, ToolSpec):
            if tools is None or not tools.has(spec.fn_ref):
                add(Finding("UnresolvedToolRef", "error", f"tool node {node_id!r} references unknown tool {spec.fn_ref!r}", node=node_id))
            else:
                tin, tout = tools.schemas(spec.fn_ref)
                if tin != spec.input_schema or tout != spec.output_schema:
                    add(
                        Finding(
                            "SchemaMismatch",
                            "error",
                            f"tool node {node_id!r} declares schemas differing from registry entry {spec.fn_ref!r}",
                            node=node_id,
                        )
                    )
        elif isinstance(spec, AgentSpec):
            for ref in sorted(spec.tool_refs):
                if tools is None or not tools.has(ref):
                    add(Finding("UnresolvedToolRef", "error", f"agent {node_id!r} references unknown tool {ref!r}", node=node_id))

    # branch guard structure: guards cover out-edges exactly; default last
    for node_id, node in sorted(flat.nodes.items()):
        spec = node.spec
        if not isinstance(spec, BranchSpec):
            continue
        out_ids = [e.id for e in flat.out_edges(node_id)]
        guard_edges = [g.edge_id for g in spec.guards]
        if len(set(guard_edges)) != len(guard_edges):
            add(Finding("InvalidBranch", "error", f"branch {node_id!r} has duplicate guard edges", node=node_id))
        unknown = [g for g in guard_edges if g not in out_ids]
        if unknown:
            add(Finding("InvalidBranch", "error", f"branch {node_id!r} guards reference non-out-edges: {', '.join(unknown)}", node=node_id))
        unguarded = [e for e in out_ids if e not in guard_edges]
        if unguarded:
            add(Finding("InvalidBranch", "error", f"branch {node_id!r} has unguarded out-edges: {', '.join(unguarded)}", node=node_id))
        defaults = [i for i, g in enumerate(spec.guards) if _is_default_guard(g.source)]
        if len(defaults) > 1:
            add(Finding("InvalidBranch", "error", f"branch {node_id!r} has multiple default guards", node=node_id))
        elif defaults and defaults[0] != len(spec.guards) - 1:
            add(Finding("InvalidBranch", "error", f"branch {node_id!r} default guard must be last", node=node_id))

    if cycle is not None:
        # schema derivation and guard typechecking need an acyclic graph
        return report

    try:
        output_schemas = derive_output_schemas(flat, transforms)
    except SchemaDerivationError as exc:
        add(exc.finding)
        return report

    # an initial-state key shadowing a node id would make state reads ambiguous
    for key in sorted(set(entry_state.names()) & set(flat.nodes)):
        add(Finding("SchemaMismatch", "error", f"entry-state key {key!r} collides with a node id", node=key))

    # edge production vs target consumption (aggregates keep arms separate,
    # so the merge/duplicate rules do not apply to them)
    for node_id, node in sorted(flat.nodes.items()):
        if isinstance(node.spec, AggregateSpec):
            continue
        in_edges = flat.in_edges(node_id)
        target = node_input_schema(node)
        produced: dict[str, tuple[str, object]] = {}
        bad = False
        for e in in_edges:
            try:
                p = produced_schema(flat, e, output_schemas, transforms)
            except SchemaDerivationError as exc:
                add(exc.finding)
                bad = True
                continue
            for fname, ftype in p.fields:
                if fname in produced:
                    add(
                        Finding(
                            "DuplicateTargetField",
                            "error",
                            f"node {node_id!r}: field {fname!r} fed by both edge {produced[fname][0]!r} and edge {e.id!r}",
                            node=node_id,
                        )
                    )
                    bad = True
                else:
                    produced[fname] = (e.id, ftype)
        if target is None or bad:
            continue
        if in_edges:
            got = {k: t for k, (_, t) in produced.items()}
            want = target.as_dict()
            if set(got) != set(want):
                missing = sorted(set(want) - set(got))
                extra = sorted(set(got) - set(want))
                bits = []
                if missing:
                    bits.append(f"missing: {', '.join(missing)}")
                if extra:
                    bits.append(f"unexpected: {', '.join(extra)}")
                add(Finding("SchemaMismatch", "error", f"node {node_id!r} input not covered by in-edges ({'; '.join(bits)})", node=node_id))
            else:
                for fname, ftype in want.items():
                    if got[fname] != ftype:
                        add(
                            Finding(
                                "SchemaMismatch",
                                "error",
                                f"node {node_id!r} field {fname!r}: expected {ftype!r}, edges produce {got[fname]!r}",
                                node=node_id,
                            )
                        )
        else:
            # entry node: input record is sliced from the initial state
            for fname, ftype in target.fields:
                have = entry_state.get(fname)
                if have is None:
                    add(
                        Finding(
                            "SchemaMismatch",
                            "error",
                            f"entry node {node_id!r} needs state key {fname!r} absent from the entry-state schema",
                            node=node_id,
                        )
                    )
                elif have != ftype:
                    add(
                        Finding(
                            "SchemaMismatch",
                            "error",
                            f"entry node {node_id!r} key {fname!r}: expected {ftype!r}, entry state has {have!r}",
                            node=node_id,
                        )
                    )

    # guards must typecheck to bool against the derivable state schema
    state_schema = Schema(dict(entry_state.fields) | {nid: RecordOf(s) for nid, s in output_schemas.items()})
    for node_id, node in sorted(flat.nodes.items()):
        spec = node.spec
        if not isinstance(spec, BranchSpec):
            continue
        for g in spec.guards:
            try:
                compile_guard(g.source, state_schema)
            except Exception as exc:
                add(
                    Finding(
                        "IllFormedPredicate",
                        "error",
                        f"branch {node_id!r} guard on edge {g.edge_id!r}: {exc}",
                        node=node_id,
                        edge=g.edge_id,
                    )
                )

    if report.ok:
        graph.seal()
    return report


def _is_default_guard(source: str) -> bool:
    try:
        e = parse_source(source)
    except Exception:
        return False
    return isinstance(e, Literal) and e.value.tag == "bool" and e.value.payload is True


# --- encapsulation ----------------------------------------------------------------------


def encapsulate(graph: WorkflowGraph, node_ids: Iterable[str], name: str) -> tuple[WorkflowGraph, SubgraphDef]:
    """Replace a connected convex subset with a single composite node.

    Boundary edges keep their ids; the definition records which inner node
    each boundary edge originally touched so inline() can reverse the cut
    exactly.
    """
    subset = set(node_ids)
    if not subset:
        raise EmptySubset("cannot encapsulate an empty subset")
    missing = subset - set(graph.nodes)
    if missing:
        raise UnknownNode(f"unknown nodes: {', '.join(sorted(missing))}")
    if name in graph.nodes and name not in subset:
        raise DuplicateNodeId(f"composite id {name!r} collides with an existing node")

    # convexity: no path from inside to outside back to inside
    succs: dict[str, set[str]] = {n: set() for n in graph.nodes}
    preds: dict[str, set[str]] = {n: set() for n in graph.nodes}
    for e in graph.edges.values():
        succs[e.src].add(e.dst)
        preds[e.dst].add(e.src)

    def reach(start: set[str], adj: dict[str, set[str]]) -> set[str]:
        seen: set[str] = set()
        stack = [x for n in start for x in adj[n]]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(adj[n])
        return seen

    below = reach(subset, succs) - subset
    above = reach(subset, preds) - subset
    crossing = below & above
    if crossing:
        raise NonConvexSubset(f"paths leave and re-enter the subset through: {', '.join(sorted(crossing))}")

    # weak connectivity within the subset
    undirected: dict[str, set[str]] = {n: set() for n in subset}
    for e in graph.edges.values():
        if e.src in subset and e.dst in subset:
            undirected[e.src].add(e.dst)
            undirected[e.dst].add(e.src)
    start = next(iter(sorted(subset)))
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        for m in undirected[n]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    if seen != subset:
        raise NonConvexSubset("subset is not connected")

    inner = WorkflowGraph(name=name, version=graph.version)
    for nid in sorted(subset):
        inner.add(nid, graph.nodes[nid].spec)
    input_bindings: list[tuple[str, str]] = []
    output_bindings: list[tuple[str, str]] = []

    host = WorkflowGraph(name=graph.name, version=graph.version)
    for nid, node in graph.nodes.items():
        if nid not in subset:
            host.add(nid, node.spec)

    definition = SubgraphDef(name, inner, (), ())  # bindings filled below
    host.add(name, SubgraphSpec(definition))

    for eid, e in graph.edges.items():
        inside_src, inside_dst = e.src in subset, e.dst in subset
        if inside_src and inside_dst:
            inner.connect(e.src, e.dst, transform=e.transform, field_map=e.mapping(), edge_id=eid)
        elif inside_dst:
            host.connect(e.src, name, transform=e.transform, field_map=e.mapping(), edge_id=eid)
            input_bindings.append((eid, e.dst))
        elif inside_src:
            host.connect(name, e.dst, transform=e.transform, field_map=e.mapping(), edge_id=eid)
            output_bindings.append((eid, e.src))
        else:
            host.connect(e.src, e.dst, transform=e.transform, field_map=e.mapping(), edge_id=eid)

    definition = SubgraphDef(name, inner, tuple(sorted(input_bindings)), tuple(sorted(output_bindings)))
    host.nodes[name] = Node(name, SubgraphSpec(definition))
    return host, definition


def inline(graph: WorkflowGraph) -> WorkflowGraph:
    """Expand every composite node; inner ids are prefixed ``<composite>__``.

    inline(encapsulate(g, S, name)) is observationally identical to g modulo
    that renaming.
    """
    out = WorkflowGraph(name=graph.name, version=graph.version)
    renames: dict[str, dict[str, str]] = {}  # composite id -> inner id -> new id

    for nid, node in graph.nodes.items():
        if not isinstance(node.spec, SubgraphSpec):
            out.add(nid, node.spec)
            continue
        d = node.spec.definition
        mapping: dict[str, str] = {}
        for inner_id, inner_node in d.graph.nodes.items():
            new_id = f"{nid}__{inner_id}"
            mapping[inner_id] = new_id
            out.add(new_id, inner_node.spec)
        for inner_eid, inner_e in d.graph.edges.items():
            out.connect(
                mapping[inner_e.src],
                mapping[inner_e.dst],
                transform=inner_e.transform,
                field_map=inner_e.mapping(),
                edge_id=f"{nid}__{inner_eid}",
            )
        renames[nid] = mapping

    for eid, e in graph.edges.items():
        src, dst = e.src, e.dst
        if src in renames:
            node = graph.nodes[src]
            assert isinstance(node.spec, SubgraphSpec)
            bound = node.spec.definition.output_binding(eid)
            if bound is None:
                raise UnknownNode(f"edge {eid!r} has no output binding on composite {src!r}")
            src = renames[src][bound]
        if dst in renames:
            node = graph.nodes[dst]
            assert isinstance(node.spec, SubgraphSpec)
            bound = node.spec.definition.input_binding(eid)
            if bound is None:
                raise UnknownNode(f"edge {eid!r} has no input binding on composite {dst!r}")
            dst = renames[dst][bound]
        out.connect(src, dst, transform=e.transform, field_map=e.mapping(), edge_id=eid)

    if any(isinstance(n.spec, SubgraphSpec) for n in out.nodes.values()):
        return inline(out)
    return out
