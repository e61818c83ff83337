import random

import networkx as nx
import pytest

from detflow.errors import (
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
from detflow.graph import (
    FIRST_AVAILABLE,
    REQUIRE_ALL,
    AgentSpec,
    AggregateSpec,
    BranchSpec,
    FanOutSpec,
    Guard,
    SubgraphSpec,
    ToolSpec,
    TransformRegistry,
    WorkflowGraph,
    derive_output_schemas,
    encapsulate,
    find_cycle,
    inline,
    layer_assignment,
    node_input_schema,
    produced_schema,
    state_schema_for,
    topological_order,
    validate,
)
from detflow.nodes import default_tool_registry
from detflow.recovery import Retry
from detflow.values import BOOL, INT, STRING, ListOf, RecordOf, Schema, Value

IO = Schema({"n": INT})


class AgreeableTools:
    """Resolver that accepts any ref with whatever schemas the node declared.
    Lets topology tests use made-up tool names without registry noise."""

    def __init__(self, graph: WorkflowGraph):
        self._schemas: dict[str, tuple[Schema, Schema]] = {}
        for node in graph.nodes.values():
            if isinstance(node.spec, ToolSpec):
                self._schemas.setdefault(node.spec.fn_ref, (node.spec.input_schema, node.spec.output_schema))

    def has(self, ref: str) -> bool:
        return True

    def schemas(self, ref: str) -> tuple[Schema, Schema]:
        return self._schemas.get(ref, (Schema(), Schema()))


def tnode(out=IO, inp=IO):
    return ToolSpec("identity", inp, out)


def chain(n, prefix="c"):
    g = WorkflowGraph("chain")
    for i in range(n):
        g.add(f"{prefix}{i}", ToolSpec("noop", Schema(), Schema()))
    for i in range(n - 1):
        g.connect(f"{prefix}{i}", f"{prefix}{i + 1}")
    return g


# --- construction rules --------------------------------------------------------


def test_duplicate_node_rejected():
    g = WorkflowGraph()
    g.add("a", tnode())
    with pytest.raises(DuplicateNodeId):
        g.add("a", tnode())


def test_edges_require_known_endpoints():
    g = WorkflowGraph()
    g.add("a", tnode())
    with pytest.raises(UnknownNode):
        g.connect("a", "ghost")
    with pytest.raises(UnknownNode):
        g.connect("ghost", "a")


def test_self_loop_rejected():
    g = WorkflowGraph()
    g.add("a", tnode())
    with pytest.raises(SelfLoop):
        g.connect("a", "a")


def test_duplicate_edge_id_rejected():
    g = chain(3)
    with pytest.raises(DuplicateEdgeId):
        g.connect("c0", "c2", edge_id="c0->c1")


def test_auto_edge_ids_unique():
    g = WorkflowGraph()
    g.add("a", tnode())
    g.add("b", tnode(inp=Schema({"n": INT, "m": INT})))
    g.connect("a", "b", field_map=[("n", "n")])
    g.connect("a", "b", field_map=[("n", "m")])
    assert sorted(g.edges) == ["a->b", "a->b#2"]


def test_field_map_may_not_reuse_a_source_field():
    """The serialized map is keyed by source field, so reuse within one edge
    would not round-trip; it must be two parallel edges instead."""
    g = WorkflowGraph()
    g.add("a", tnode())
    g.add("b", tnode(inp=Schema({"n": INT, "m": INT})))
    with pytest.raises(InvalidEdgeSpec):
        g.connect("a", "b", field_map=[("n", "n"), ("n", "m")])


def test_invalid_specs_rejected():
    with pytest.raises(InvalidNodeSpec):
        AgentSpec("p", IO, IO, max_iterations=0)
    with pytest.raises(InvalidNodeSpec):
        ToolSpec("f", IO, IO, timeout_ms=0)
    with pytest.raises(InvalidNodeSpec):
        AggregateSpec("sometimes")


def test_sealed_graph_rejects_mutation():
    g = chain(2)
    report = validate(g, tools=default_tool_registry())
    assert report.ok and g.sealed
    with pytest.raises(SealedGraph):
        g.add("x", tnode())
    with pytest.raises(SealedGraph):
        g.connect("c0", "c1")


# --- canonical hashing ------------------------------------------------------------


def build_diamond(order):
    """Same diamond, nodes/edges inserted in the given permutation."""
    nodes = {
        "src": ToolSpec("noop", Schema(), Schema()),
        "left": ToolSpec("noop", Schema(), Schema()),
        "right": ToolSpec("noop", Schema(), Schema()),
        "sink": AggregateSpec(REQUIRE_ALL),
    }
    edges = [
        ("e1", "src", "left"),
        ("e2", "src", "right"),
        ("e3", "left", "sink"),
        ("e4", "right", "sink"),
    ]
    g = WorkflowGraph("diamond")
    for key in order:
        g.add(key, nodes[key])
    rng = random.Random(order[0])
    for eid, s, d in sorted(edges, key=lambda _: rng.random()):
        g.connect(s, d, edge_id=eid)
    return g


def test_hash_invariant_under_insertion_order():
    orders = [
        ["src", "left", "right", "sink"],
        ["sink", "right", "left", "src"],
        ["left", "sink", "src", "right"],
    ]
    hashes = {build_diamond(o).canonical_hash() for o in orders}
    assert len(hashes) == 1


def test_hash_sensitive_to_content():
    base = chain(3).canonical_hash()
    assert chain(4).canonical_hash() != base
    g = chain(3)
    g.nodes["c1"] = g.nodes["c1"]  # no-op
    assert g.canonical_hash() == base
    g2 = chain(3)
    g2.connect("c0", "c2")
    assert g2.canonical_hash() != base
    g3 = WorkflowGraph("chain", version="2")
    for i in range(3):
        g3.add(f"c{i}", ToolSpec("noop", Schema(), Schema()))
    for i in range(2):
        g3.connect(f"c{i}", f"c{i + 1}")
    assert g3.canonical_hash() != base


def test_hash_covers_spec_details():
    def agent(prompt="p", max_it=3):
        g = WorkflowGraph()
        g.add("a", AgentSpec(prompt, IO, IO, max_iterations=max_it))
        return g.canonical_hash()

    assert agent() == agent()
    assert agent(prompt="q") != agent()
    assert agent(max_it=5) != agent()

    def tool(retry=None):
        g = WorkflowGraph()
        g.add("t", ToolSpec("noop", Schema(), Schema(), retry=retry) if retry else ToolSpec("noop", Schema(), Schema()))
        return g.canonical_hash()

    assert tool(Retry(max_attempts=5)) != tool()


# --- topology vs networkx ---------------------------------------------------------


def random_dag_edges(rng, n, p):
    """Edges over a random node order; acyclic by construction."""
    perm = list(range(n))
    rng.shuffle(perm)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((f"n{perm[i]:03d}", f"n{perm[j]:03d}"))
    return edges


def to_workflow(n, edges):
    g = WorkflowGraph("rand")
    for i in range(n):
        g.add(f"n{i:03d}", ToolSpec("noop", Schema(), Schema()))
    for s, d in edges:
        g.connect(s, d)
    return g


@pytest.mark.parametrize("seed", range(20))
def test_cycle_detection_agrees_with_networkx(seed):
    rng = random.Random(seed)
    n = rng.randint(3, 14)
    edges = random_dag_edges(rng, n, p=0.25)
    if rng.random() < 0.5 and edges:
        # deliberately close a cycle
        s, d = rng.choice(edges)
        edges.append((d, s))
    nxg = nx.DiGraph()
    nxg.add_nodes_from(f"n{i:03d}" for i in range(n))
    nxg.add_edges_from(edges)
    try:
        g = to_workflow(n, edges)
    except SelfLoop:
        return
    cyc = find_cycle(g)
    assert (cyc is not None) == (not nx.is_directed_acyclic_graph(nxg))
    if cyc is not None:
        # the witness must actually be a cycle in the graph
        assert len(cyc) >= 2
        for a, b in zip(cyc, cyc[1:] + cyc[:1]):
            assert nxg.has_edge(a, b)


@pytest.mark.parametrize("seed", range(20))
def test_layers_are_longest_paths(seed):
    rng = random.Random(seed + 100)
    n = rng.randint(3, 14)
    g = to_workflow(n, random_dag_edges(rng, n, p=0.3))
    layers = layer_assignment(g)
    for node_id in g.nodes:
        preds = [e.src for e in g.in_edges(node_id)]
        if not preds:
            assert layers[node_id] == 0
        else:
            assert layers[node_id] == 1 + max(layers[p] for p in preds)


def test_topological_order_is_layer_then_id():
    g = to_workflow(8, random_dag_edges(random.Random(5), 8, 0.3))
    order = topological_order(g)
    layers = layer_assignment(g)
    assert order == sorted(((nid, layers[nid]) for nid in g.nodes), key=lambda t: (t[1], t[0]))
    # topological consistency: every edge goes to a strictly later layer
    for e in g.edges.values():
        assert layers[e.src] < layers[e.dst]


def test_find_cycle_on_cyclic_topo_raises():
    g = WorkflowGraph()
    g.add("a", tnode())
    g.add("b", tnode())
    g.connect("a", "b")
    g.connect("b", "a")
    assert find_cycle(g) is not None
    with pytest.raises(CycleError):
        topological_order(g)


# --- schema derivation ----------------------------------------------------------------


def test_produced_schema_identity_and_maps():
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema(), Schema({"x": INT, "y": STRING})))
    g.add("b", ToolSpec("g", Schema({"x": INT, "y": STRING}), Schema()))
    g.add("c", ToolSpec("h", Schema({"renamed": INT}), Schema()))
    g.connect("a", "b")  # identity
    g.connect("a", "c", field_map=[("x", "renamed")])
    outs = {"a": Schema({"x": INT, "y": STRING}), "b": Schema(), "c": Schema()}
    assert produced_schema(g, g.edges["a->b"], outs, None) == Schema({"x": INT, "y": STRING})
    assert produced_schema(g, g.edges["a->c"], outs, None) == Schema({"renamed": INT})


def test_produced_schema_empty_map_produces_nothing():
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema(), Schema({"x": INT})))
    g.add("b", ToolSpec("g", Schema(), Schema()))
    g.connect("a", "b", field_map={})
    outs = {"a": Schema({"x": INT}), "b": Schema()}
    assert produced_schema(g, g.edges["a->b"], outs, None) == Schema()


def test_transforms_change_edge_schema():
    reg = TransformRegistry()
    reg.register(
        "stringify",
        Schema({"x": INT}),
        Schema({"s": STRING}),
        lambda v: Value.of_record({"s": Value.of_string(str(v.field("x").payload))}),
    )
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema(), Schema({"x": INT})))
    g.add("b", ToolSpec("g", Schema({"s": STRING}), Schema()))
    g.connect("a", "b", transform="stringify")
    outs = {"a": Schema({"x": INT}), "b": Schema()}
    assert produced_schema(g, g.edges["a->b"], outs, reg) == Schema({"s": STRING})


def test_aggregate_output_schemas():
    g = WorkflowGraph()
    out = Schema({"r": INT})
    g.add("w1", ToolSpec("f", Schema(), out))
    g.add("w2", ToolSpec("f", Schema(), out))
    g.add("all", AggregateSpec(REQUIRE_ALL))
    g.add("any", AggregateSpec(FIRST_AVAILABLE))
    g.connect("w1", "all", edge_id="a1")
    g.connect("w2", "all", edge_id="a2")
    g.connect("w1", "any", edge_id="b1")
    g.connect("w2", "any", edge_id="b2")
    outs = derive_output_schemas(g, None)
    assert outs["all"] == Schema({"a1": RecordOf(out), "a2": RecordOf(out)})
    assert outs["any"] == out


def test_state_schema_includes_entry_and_outputs():
    g = chain(2)
    entry = Schema({"seed": STRING})
    ss = state_schema_for(g, entry)
    assert ss.get("seed") == STRING
    assert ss.get("c0") == RecordOf(Schema())
    assert ss.get("c1") == RecordOf(Schema())


# --- validation ------------------------------------------------------------------------


def ok_tools():
    return default_tool_registry()


def test_validate_empty_graph():
    report = validate(WorkflowGraph())
    assert not report.ok and "EmptyGraph" in report.codes()


def test_validate_cycle():
    g = WorkflowGraph()
    g.add("a", ToolSpec("noop", Schema(), Schema()))
    g.add("b", ToolSpec("noop", Schema(), Schema()))
    g.connect("a", "b")
    g.connect("b", "a")
    report = validate(g, tools=ok_tools())
    assert not report.ok and "CycleDetected" in report.codes()


def test_validate_unknown_tool_and_agent_refs():
    g = WorkflowGraph()
    g.add("t", ToolSpec("no_such_tool", Schema(), Schema()))
    g.add("a", AgentSpec("p", Schema(), IO, tool_refs=frozenset({"ghost_tool"})))
    report = validate(g, tools=ok_tools())
    codes = [f.code for f in report.errors()]
    assert codes.count("UnresolvedToolRef") == 2


def test_validate_tool_schema_must_match_registry():
    g = WorkflowGraph()
    g.add("t", ToolSpec("add", Schema({"a": INT}), Schema({"sum": INT})))
    report = validate(g, tools=ok_tools())
    assert "SchemaMismatch" in report.codes()


def test_validate_edge_schema_mismatch():
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema(), Schema({"x": INT})))
    g.add("b", ToolSpec("g", Schema({"y": STRING}), Schema()))
    g.connect("a", "b")
    report = validate(g)
    assert "SchemaMismatch" in report.codes()
    assert not report.ok


def test_validate_duplicate_target_field():
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema(), Schema({"x": INT})))
    g.add("b", ToolSpec("f", Schema(), Schema({"x": INT})))
    g.add("c", ToolSpec("g", Schema({"x": INT}), Schema()))
    g.connect("a", "c")
    g.connect("b", "c")
    report = validate(g)
    assert "DuplicateTargetField" in report.codes()


def test_validate_entry_node_needs_state_keys():
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema({"missing": INT}), Schema()))
    report = validate(g)
    assert "SchemaMismatch" in report.codes()
    report2 = validate(g, entry_state=Schema({"missing": INT}))
    assert "SchemaMismatch" not in {f.code for f in report2.errors()}


def test_validate_branch_rules():
    def branch_graph(guards):
        g = WorkflowGraph()
        g.add("src", ToolSpec("f", Schema(), IO))
        g.add("br", BranchSpec(IO, guards=guards))
        g.add("x", ToolSpec("g", IO, Schema()))
        g.add("y", ToolSpec("g", IO, Schema()))
        g.connect("src", "br")
        g.connect("br", "x", edge_id="ex")
        g.connect("br", "y", edge_id="ey")
        return g

    def check(guards):
        g = branch_graph(guards)
        return validate(g, tools=AgreeableTools(g))

    ok = check((Guard("ex", "br.n > 0"), Guard("ey", "true")))
    assert ok.ok, [str(f) for f in ok.findings]

    r = check((Guard("ex", "br.n > 0"),))
    assert "InvalidBranch" in r.codes()  # ey unguarded

    r = check((Guard("ex", "br.n > 0"), Guard("ez", "true")))
    assert "InvalidBranch" in r.codes()  # ez is not an out-edge

    r = check((Guard("ex", "true"), Guard("ey", "true")))
    assert "InvalidBranch" in r.codes()  # two defaults / default not last

    r = check((Guard("ex", "br.n +"), Guard("ey", "true")))
    assert "IllFormedPredicate" in r.codes()

    r = check((Guard("ex", "br.n + 1"), Guard("ey", "true")))
    assert "IllFormedPredicate" in r.codes()  # int, not bool

    r = check((Guard("ex", "ghost.key > 0"), Guard("ey", "true")))
    assert "IllFormedPredicate" in r.codes()


def test_validate_first_available_needs_uniform_arms():
    g = WorkflowGraph()
    g.add("w1", ToolSpec("f1", Schema(), Schema({"r": INT})))
    g.add("w2", ToolSpec("f2", Schema(), Schema({"r": STRING})))
    g.add("any", AggregateSpec(FIRST_AVAILABLE))
    g.connect("w1", "any")
    g.connect("w2", "any")
    report = validate(g, tools=AgreeableTools(g))
    assert not report.ok
    assert any(f.code == "SchemaMismatch" and f.node == "any" for f in report.errors())


def test_validate_first_available_without_arms():
    g = WorkflowGraph()
    g.add("lonely", AggregateSpec(FIRST_AVAILABLE))
    report = validate(g)
    assert "InvalidAggregate" in report.codes()


def test_validate_entry_state_key_shadows_node_id():
    g = chain(2)
    report = validate(g, entry_state=Schema({"c0": INT}))
    assert "SchemaMismatch" in report.codes()


def test_validate_unresolved_transform():
    g = WorkflowGraph()
    g.add("a", ToolSpec("f", Schema(), IO))
    g.add("b", ToolSpec("g", IO, Schema()))
    g.connect("a", "b", transform="nope")
    report = validate(g)
    assert "UnresolvedTransform" in report.codes()


# --- subgraphs ------------------------------------------------------------------------


def linear_with_region():
    g = WorkflowGraph("host")
    s = Schema({"n": INT})
    g.add("pre", ToolSpec("f", Schema(), s))
    g.add("m1", ToolSpec("g", s, s))
    g.add("m2", ToolSpec("g", s, s))
    g.add("post", ToolSpec("h", s, Schema()))
    g.connect("pre", "m1")
    g.connect("m1", "m2")
    g.connect("m2", "post")
    return g


def test_encapsulate_inline_roundtrip_hash():
    flat_hash = linear_with_region().canonical_hash()
    host, definition = encapsulate(linear_with_region(), ["m1", "m2"], "mid")
    assert "mid" in host.nodes
    assert isinstance(host.nodes["mid"].spec, SubgraphSpec)
    assert definition.name == "mid"
    flattened = inline(host)
    # inlining renames inner nodes, so hashes differ from the original flat
    # graph, but the flattened structure must be a valid DAG with the same
    # node count and re-inlining must be a fixed point
    assert len(flattened.nodes) == 4
    assert find_cycle(flattened) is None
    assert inline(flattened).canonical_hash() == flattened.canonical_hash()
    assert flattened.canonical_hash() != flat_hash  # renamed ids
    assert sorted(flattened.nodes) == ["mid__m1", "mid__m2", "post", "pre"]


def test_encapsulate_rejects_non_convex():
    g = WorkflowGraph()
    s = Schema({"n": INT})
    g.add("a", ToolSpec("f", Schema(), s))
    g.add("b", ToolSpec("g", s, s))
    g.add("c", ToolSpec("g", s, s))
    g.connect("a", "b")
    g.connect("b", "c")
    with pytest.raises(NonConvexSubset):
        encapsulate(g, ["a", "c"], "bad")
    with pytest.raises(EmptySubset):
        encapsulate(g, [], "empty")


def test_validate_inlines_composites():
    host, _ = encapsulate(linear_with_region(), ["m1", "m2"], "mid")
    report = validate(host, tools=AgreeableTools(linear_with_region()))
    assert report.ok, [str(f) for f in report.findings]


def test_node_input_schema_kinds():
    assert node_input_schema(WorkflowGraph().add("a", tnode()).nodes["a"]) == IO
    g = WorkflowGraph()
    g.add("br", BranchSpec(IO))
    g.add("fan", FanOutSpec(IO))
    g.add("agg", AggregateSpec(REQUIRE_ALL))
    assert node_input_schema(g.nodes["br"]) == IO
    assert node_input_schema(g.nodes["fan"]) == IO
    assert node_input_schema(g.nodes["agg"]) is None
