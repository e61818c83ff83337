"""The deterministic dataflow scheduler.

Parallelism and reproducibility coexist through two rules. First, node
bodies may run concurrently, but their results are *applied* (committed to
state, appended to the trace) strictly in (layer, node id) order by the one
scheduler thread. Second, a node's input record and state snapshot are
captured at the moment its dependencies resolve, which is itself an apply
step, so nothing a worker observes depends on physical timing or worker
count. The trace is then a pure function of (graph, initial state, seed).
"""

from __future__ import annotations

import hashlib
import heapq
import json
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

from .errors import (
    AggregateUnsatisfiable,
    CancelledRun,
    CheckpointCorrupt,
    CheckpointIncompatible,
    DetflowError,
    EvalError,
    ExecutionFailed,
    InternalInvariantError,
    NoBranchTaken,
    SchemaViolation,
    StallError,
    ToolFailed,
    ValidationFailed,
)
from .graph import (
    REQUIRE_ALL,
    AggregateSpec,
    AgentSpec,
    BranchSpec,
    EdgeSpec,
    Node,
    SubgraphSpec,
    ToolSpec,
    TransformRegistry,
    WorkflowGraph,
    derive_output_schemas,
    inline,
    node_input_schema,
    retry_canonical_obj,
    state_schema_for,
    topological_order,
    validate,
)
from .memory import ScratchSpace, StateEntry, StateSnapshot, StateStore
from .nodes import (
    AgentOutcome,
    ToolRegistry,
    default_tool_registry,
    external_section,
    install_clock,
    run_agent,
    run_tool_node,
    uninstall_clock,
)
from .predicate import TypedExpr, compile_guard, evaluate, state_keys
from .providers import MockProvider, Provider
from .recovery import FailFast, RecoveryPolicy, Retry, retry_delay_ms
from .values import (
    Schema,
    Value,
    canonical_digest,
    canonical_json_bytes,
    canonical_obj,
    conform_error,
    digest_of,
    record_conform_error,
    schema_descriptor,
    schema_from_descriptor,
    type_of_value,
    value_from_canonical_obj,
)

PENDING = "pending"
READY = "ready"
RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"
SKIPPED = "skipped"

TERMINAL = frozenset({COMPLETED, FAILED, SKIPPED})

DEFAULT_WATCHDOG_MS = 120_000


@dataclass
class ExecutionConfig:
    worker_limit: int = 4
    recovery: RecoveryPolicy = field(default_factory=FailFast)
    watchdog_ms: int = DEFAULT_WATCHDOG_MS
    checkpoint_path: str | None = None
    seed: int = 0
    collect_metrics: bool = True
    # test affordance: halt after N applied nodes, leaving a resumable checkpoint
    stop_after_commits: int | None = None

    def __post_init__(self):
        if self.worker_limit < 1:
            raise ValueError("worker_limit must be >= 1")
        if self.watchdog_ms <= 0:
            raise ValueError("watchdog_ms must be positive")

    def digest(self) -> str:
        # only the fields the trace depends on; worker_limit is deliberately absent
        return digest_of({"recovery": retry_canonical_obj(self.recovery), "seed": self.seed})


@dataclass
class NodeRun:
    node_id: str
    status: str = PENDING
    attempts: int = 0
    framework_ms: float = 0.0
    external_ms: float = 0.0


# --- trace -----------------------------------------------------------------------

EVENT_KINDS = ("dispatch", "commit", "skip", "retry", "checkpoint", "error")


@dataclass(frozen=True)
class TraceEvent:
    logical_time: int
    kind: str
    node: str
    digest: str

    def to_obj(self) -> dict:
        return {"t": self.logical_time, "kind": self.kind, "node": self.node, "digest": self.digest}

    @classmethod
    def from_obj(cls, obj: dict) -> "TraceEvent":
        return cls(int(obj["t"]), str(obj["kind"]), str(obj["node"]), str(obj["digest"]))

    def line(self) -> bytes:
        return canonical_json_bytes(self.to_obj())


class ExecutionTrace:
    """Ordered committed event log; its digest is the determinism witness."""

    def __init__(self, events: list[TraceEvent] | None = None):
        self.events: list[TraceEvent] = list(events or [])

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def lines(self) -> list[bytes]:
        return [e.line() for e in self.events]

    def digest(self) -> str:
        return hashlib.sha256(b"\n".join(self.lines())).hexdigest()

    def to_text(self) -> str:
        return "".join(line.decode("utf-8") + "\n" for line in self.lines())

    @classmethod
    def from_text(cls, text: str) -> "ExecutionTrace":
        events = []
        for raw in text.splitlines():
            if raw.strip():
                events.append(TraceEvent.from_obj(json.loads(raw)))
        return cls(events)


# --- metrics ----------------------------------------------------------------------


def throughput_opm(mean_processing_ms: float) -> float:
    """Operations per minute for a given mean per-operation time."""
    if mean_processing_ms <= 0:
        raise ValueError("mean_processing_ms must be positive")
    return 60000.0 / mean_processing_ms


@dataclass
class Metrics:
    per_node: dict[str, NodeRun] = field(default_factory=dict)
    framework_ms_total: float = 0.0
    external_ms_total: float = 0.0
    mean_processing_ms: float = 0.0
    throughput_opm: float = 0.0
    peak_memory_bytes: int = 0
    framework_errors: int = 0
    model_errors: int = 0
    tasks_failed: int = 0

    def to_obj(self) -> dict:
        return {
            "framework_ms_total": self.framework_ms_total,
            "external_ms_total": self.external_ms_total,
            "mean_processing_ms": self.mean_processing_ms,
            "throughput_opm": self.throughput_opm,
            "peak_memory_bytes": self.peak_memory_bytes,
            "framework_errors": self.framework_errors,
            "model_errors": self.model_errors,
            "tasks_failed": self.tasks_failed,
            "per_node": {
                n: {
                    "status": r.status,
                    "attempts": r.attempts,
                    "framework_ms": r.framework_ms,
                    "external_ms": r.external_ms,
                }
                for n, r in sorted(self.per_node.items())
            },
        }


@dataclass
class BatchReport:
    """Aggregate counters over a batch of runs. Failure share is reported
    against both denominators (all runs, failed runs) because the choice is
    genuinely ambiguous and both views are useful."""

    runs: int = 0
    failed: int = 0
    framework_failures: int = 0
    model_failures: int = 0
    model_error_events: int = 0
    mean_processing_ms: float = 0.0
    throughput: float = 0.0

    @property
    def hallucination_rate(self) -> float:
        return self.framework_failures / self.runs if self.runs else 0.0

    @property
    def framework_share_of_failures(self) -> float:
        return self.framework_failures / self.failed if self.failed else 0.0

    def add(self, metrics: Metrics) -> None:
        self.runs += 1
        self.model_error_events += metrics.model_errors
        if metrics.tasks_failed:
            self.failed += 1
            if metrics.framework_errors:
                self.framework_failures += 1
            else:
                self.model_failures += 1

    def finish(self, processing_samples_ms: list[float]) -> None:
        if processing_samples_ms:
            self.mean_processing_ms = sum(processing_samples_ms) / len(processing_samples_ms)
            if self.mean_processing_ms > 0:
                self.throughput = throughput_opm(self.mean_processing_ms)

    def to_obj(self) -> dict:
        return {
            "runs": self.runs,
            "failed": self.failed,
            "framework_failures": self.framework_failures,
            "model_failures": self.model_failures,
            "model_error_events": self.model_error_events,
            "mean_processing_ms": self.mean_processing_ms,
            "throughput_opm": self.throughput,
            "hallucination_rate": self.hallucination_rate,
            "framework_share_of_failures": self.framework_share_of_failures,
        }


# --- checkpoint --------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    graph_hash: str
    config_digest: str
    state_schema: Schema
    history: tuple[StateEntry, ...]
    statuses: tuple[tuple[str, str], ...]
    attempts: tuple[tuple[str, int], ...]
    dead_edges: frozenset[str]
    trace: tuple[TraceEvent, ...]
    event_counter: int

    def to_obj(self) -> dict:
        return {
            "graph_hash": self.graph_hash,
            "config_digest": self.config_digest,
            "state_schema": schema_descriptor(self.state_schema),
            "history": [
                {
                    "key": e.key,
                    "version": e.version,
                    "value": canonical_obj(e.value),
                    "writer": e.writer,
                    "t": e.logical_time,
                }
                for e in self.history
            ],
            "statuses": {n: s for n, s in self.statuses},
            "attempts": {n: a for n, a in self.attempts},
            "dead_edges": sorted(self.dead_edges),
            "trace": [e.to_obj() for e in self.trace],
            "event_counter": self.event_counter,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Checkpoint":
        try:
            return cls(
                graph_hash=str(obj["graph_hash"]),
                config_digest=str(obj["config_digest"]),
                state_schema=schema_from_descriptor(obj["state_schema"]),
                history=tuple(
                    StateEntry(
                        key=str(e["key"]),
                        version=int(e["version"]),
                        value=value_from_canonical_obj(e["value"]),
                        writer=str(e["writer"]),
                        logical_time=int(e["t"]),
                    )
                    for e in obj["history"]
                ),
                statuses=tuple(sorted((str(k), str(v)) for k, v in obj["statuses"].items())),
                attempts=tuple(sorted((str(k), int(v)) for k, v in obj["attempts"].items())),
                dead_edges=frozenset(str(x) for x in obj["dead_edges"]),
                trace=tuple(TraceEvent.from_obj(e) for e in obj["trace"]),
                event_counter=int(obj["event_counter"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointCorrupt(f"malformed checkpoint record: {exc}") from exc

    def payload_bytes(self) -> bytes:
        return canonical_json_bytes(self.to_obj())

    def integrity_digest(self) -> str:
        return hashlib.sha256(self.payload_bytes()).hexdigest()

    def file_bytes(self) -> bytes:
        return canonical_json_bytes({"integrity": self.integrity_digest(), "record": self.to_obj()})

    def save(self, path: str) -> str:
        blob = self.file_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        return self.integrity_digest()

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            wrapper = json.loads(raw)
            integrity = wrapper["integrity"]
            record = wrapper["record"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointCorrupt(f"unreadable checkpoint file: {exc}") from exc
        cp = cls.from_obj(record)
        if cp.integrity_digest() != integrity:
            raise CheckpointCorrupt("integrity digest mismatch")
        return cp


# --- results ------------------------------------------------------------------------


@dataclass
class ExecutionResult:
    snapshot: StateSnapshot
    trace: ExecutionTrace
    metrics: Metrics
    statuses: dict[str, str]
    stopped_early: bool = False

    def final_state(self) -> dict[str, Value]:
        return self.snapshot.as_dict()


# --- pure scheduling helpers (exposed for tests as well) -------------------------------


def compute_ready(
    graph: WorkflowGraph,
    statuses: Mapping[str, str],
    dead_edges: frozenset[str] = frozenset(),
) -> list[str]:
    """Pending nodes whose inputs are satisfied, in (layer, id) order."""
    layers = dict(topological_order(graph))
    ready = []
    for node_id in graph.nodes:
        if statuses.get(node_id, PENDING) != PENDING:
            continue
        in_edges = graph.in_edges(node_id)
        spec = graph.nodes[node_id].spec
        if isinstance(spec, AggregateSpec):
            if (
                in_edges
                and all(statuses.get(e.src) in TERMINAL for e in in_edges)
                and any(e.id not in dead_edges and statuses.get(e.src) == COMPLETED for e in in_edges)
            ):
                ready.append(node_id)
            continue
        if all(e.id not in dead_edges and statuses.get(e.src) == COMPLETED for e in in_edges):
            ready.append(node_id)
    return sorted(ready, key=lambda n: (layers[n], n))


def route_branch(guards: list[tuple[str, TypedExpr]], snapshot: StateSnapshot, node_id: str) -> str:
    """First guard (declared order) evaluating true selects its edge."""
    for edge_id, expr in guards:
        verdict = evaluate(expr, snapshot)
        if verdict.payload is True:
            return edge_id
    raise NoBranchTaken(node_id)


def aggregate_join(spec: AggregateSpec, arms: list[tuple[str, Value | None]], node_id: str) -> Value | None:
    """Combine inbound arms; ``None`` marks a dead (skipped) arm.

    require_all errors on any dead arm and returns a record keyed by edge
    id. first_available returns the first live arm in the given order, or
    None when every arm is dead (the node then skips).
    """
    if spec.policy == REQUIRE_ALL:
        fields: dict[str, Value] = {}
        for edge_id, value in arms:
            if value is None:
                raise AggregateUnsatisfiable(node_id, f"arm {edge_id!r} was skipped")
            fields[edge_id] = value
        return Value.of_record(fields)
    for _, value in arms:
        if value is not None:
            return value
    return None


def apply_recovery(failure: BaseException, policy: RecoveryPolicy, attempt: int) -> tuple[str, float]:
    """('retry', delay_ms) while the policy has attempts left, else ('fail', 0)."""
    if isinstance(policy, Retry) and attempt + 1 < policy.max_attempts:
        return ("retry", retry_delay_ms(policy, attempt))
    return ("fail", 0.0)


def detect_stall(running: frozenset[str], last_event_monotonic: float, watchdog_ms: int, now: float) -> StallError | None:
    if running and (now - last_event_monotonic) * 1000.0 >= watchdog_ms:
        return StallError(tuple(sorted(running)), watchdog_ms)
    return None


def derive_entry_schema(graph: WorkflowGraph, initial_state: Mapping[str, Value]) -> Schema:
    """Entry-state schema when none is declared: the union of entry-node
    input fields, widened by any extra keys the caller supplied (so guards
    may reference state beyond what entry nodes consume)."""
    fields: dict = {}
    for node_id in graph.entry_nodes():
        schema = node_input_schema(graph.nodes[node_id])
        if schema is None:
            continue
        for name, ftype in schema.fields:
            fields.setdefault(name, ftype)
    for key, value in initial_state.items():
        if key not in fields:
            fields[key] = type_of_value(value)
    return Schema(fields)


# --- worker completion messages --------------------------------------------------------


@dataclass
class _Completion:
    node_id: str
    output: Value | None = None
    error: BaseException | None = None
    retries: tuple[tuple[int, float], ...] = ()
    model_errors: int = 0
    attempts: int = 1
    body_ms: float = 0.0
    external_ms: float = 0.0


class _Run:
    """All mutable state of one execution. The constructing thread runs the
    scheduler loop and is the only one that touches this object; workers
    communicate exclusively through the message queue."""

    def __init__(
        self,
        graph: WorkflowGraph,
        initial_state: Mapping[str, Value],
        config: ExecutionConfig,
        provider: Provider,
        tools: ToolRegistry,
        transforms: TransformRegistry | None,
        entry_schema: Schema | None,
        checkpoint: Checkpoint | None = None,
    ):
        self.config = config
        self.provider = provider
        self.tools = tools
        self.transforms = transforms

        if entry_schema is None:
            entry_schema = derive_entry_schema(graph, initial_state)
        self.entry_schema = entry_schema

        report = validate(graph, tools=tools, transforms=transforms, entry_state=entry_schema)
        if not report.ok:
            raise ValidationFailed(report)
        self.graph_hash = graph.canonical_hash()

        flat = graph
        if any(isinstance(n.spec, SubgraphSpec) for n in graph.nodes.values()):
            flat = inline(graph)
            flat.seal()
        self.graph = flat

        self.order: list[str] = [n for n, _ in topological_order(flat)]
        self.layers: dict[str, int] = dict(topological_order(flat))
        self.output_schemas = derive_output_schemas(flat, transforms)
        self.state_schema = state_schema_for(flat, entry_schema, transforms)

        self.in_index: dict[str, list[EdgeSpec]] = {n: [] for n in flat.nodes}
        self.out_index: dict[str, list[EdgeSpec]] = {n: [] for n in flat.nodes}
        for edge in sorted(flat.edges.values(), key=lambda e: e.id):
            self.in_index[edge.dst].append(edge)
            self.out_index[edge.src].append(edge)

        # compile branch guards once; evaluation scope is the union of their keys
        self.compiled_guards: dict[str, list[tuple[str, TypedExpr]]] = {}
        self.guard_scopes: dict[str, frozenset[str]] = {}
        for node_id, node in flat.nodes.items():
            if isinstance(node.spec, BranchSpec):
                compiled = [(g.edge_id, compile_guard(g.source, self.state_schema)) for g in node.spec.guards]
                self.compiled_guards[node_id] = compiled
                scope: frozenset[str] = frozenset()
                for _, te in compiled:
                    scope |= state_keys(te.expr)
                self.guard_scopes[node_id] = scope

        self.runs: dict[str, NodeRun] = {n: NodeRun(n) for n in self.order}
        self.dead_edges: set[str] = set()
        self.trace: list[TraceEvent] = []
        self.event_counter = 0
        self.idx = 0  # apply pointer into self.order
        self.applied_commits = 0
        self.checkpointed_at = -1
        self.buffered: dict[str, _Completion] = {}
        self.inputs: dict[str, Value] = {}
        self.captured: dict[str, tuple[Value, StateSnapshot | None]] = {}
        self.capture_errors: dict[str, DetflowError] = {}
        self.resolved: dict[str, int] = {n: 0 for n in self.order}
        self.doomed: set[str] = set()
        self.dispatch_heap: list[tuple[int, str]] = []
        self.free_workers = config.worker_limit
        self.messages: "queue.Queue[tuple]" = queue.Queue()
        self.cancel = threading.Event()
        self.failure: tuple[str, BaseException] | None = None
        self.model_errors = 0
        self.stopped_early = False

        if checkpoint is not None:
            self._restore(checkpoint)
        else:
            err = self._conform_entry(initial_state)
            if err:
                raise SchemaViolation(err)
            self.store = StateStore(self.state_schema)
            if initial_state:
                self.store.commit(dict(initial_state), writer="$input")
            self.values = dict(self.store.current())
            self._seed_resolution()

    def _conform_entry(self, initial_state: Mapping[str, Value]) -> str | None:
        names = set(self.entry_schema.names())
        given = set(initial_state)
        missing = sorted(names - given)
        if missing:
            return f"initial state is missing keys: {', '.join(missing)}"
        extra = sorted(given - names)
        if extra:
            return f"initial state has undeclared keys: {', '.join(extra)}"
        for name in sorted(names):
            err = conform_error(initial_state[name], self.entry_schema.get(name), name)
            if err:
                return err
        return None

    # -- resolution / readiness ------------------------------------------------

    def _seed_resolution(self) -> None:
        for node_id in self.order:
            if not self.in_index[node_id] and self.runs[node_id].status == PENDING:
                self._node_resolved(node_id)

    def _resolve_time(self, node_id: str) -> int:
        """Logical time at which this node's inputs became available: the
        latest commit among its sources, or the initial commit for entries."""
        in_edges = self.in_index[node_id]
        if not in_edges:
            history = self.store.history
            return history[0].logical_time if history and history[0].writer == "$input" else 0
        t = 0
        for edge in in_edges:
            prov = self.store.provenance(edge.src)
            t = max(t, prov[-1].logical_time)
        return t

    def _node_resolved(self, node_id: str) -> None:
        """All in-edges settled: capture inputs and the state view now, at a
        deterministic point, and queue worker-backed nodes for dispatch."""
        node = self.graph.nodes[node_id]
        if node_id in self.doomed or not isinstance(node.spec, (AgentSpec, ToolSpec)):
            return  # the apply pointer will skip it or run it as a control node
        try:
            inputs = self._assemble_input(node_id)
        except ToolFailed as exc:
            # a transform on an in-edge raised; the node fails (in apply
            # order) instead of dispatching
            self.capture_errors[node_id] = exc
            return
        snapshot: StateSnapshot | None = None
        if isinstance(node.spec, AgentSpec):
            # as-of the resolve time, not "now": a restored run re-resolves
            # nodes later in wall time and must see the identical view
            snapshot = self.store.snapshot_asof(node.spec.declared_state_reads, self._resolve_time(node_id))
        self.captured[node_id] = (inputs, snapshot)
        self.runs[node_id].status = READY
        heapq.heappush(self.dispatch_heap, (self.layers[node_id], node_id))

    def _propagate_terminal(self, node_id: str) -> None:
        status = self.runs[node_id].status
        for edge in self.out_index[node_id]:
            dst = edge.dst
            dead = edge.id in self.dead_edges or status == SKIPPED
            if dead and not isinstance(self.graph.nodes[dst].spec, AggregateSpec):
                self.doomed.add(dst)
            self.resolved[dst] += 1
            if self.resolved[dst] == len(self.in_index[dst]) and self.runs[dst].status == PENDING:
                self._node_resolved(dst)

    # -- input assembly ----------------------------------------------------------

    def _edge_value(self, edge: EdgeSpec) -> Value:
        src = self.values[edge.src]
        if edge.transform is not None:
            tdef = self.transforms.get(edge.transform)  # type: ignore[union-attr]
            try:
                src = tdef.fn(src)
            except Exception as exc:
                raise ToolFailed(f"transform {edge.transform!r} raised: {exc}") from exc
            terr = record_conform_error(src, tdef.output_schema)
            if terr:
                raise ToolFailed(f"transform {edge.transform!r} output: {terr}")
        if edge.field_map is None:
            return src
        return Value.of_record({dst_f: src.field(src_f) for src_f, dst_f in edge.field_map})

    def _assemble_input(self, node_id: str) -> Value:
        node = self.graph.nodes[node_id]
        in_edges = self.in_index[node_id]
        if not in_edges:
            schema = node_input_schema(node) or Schema()
            return Value.of_record({name: self.values[name] for name in schema.names()})
        fields: dict[str, Value] = {}
        for edge in in_edges:
            if edge.id in self.dead_edges or self.runs[edge.src].status == SKIPPED:
                raise InternalInvariantError(f"assembling input for {node_id!r} across dead edge {edge.id!r}")
            contrib = self._edge_value(edge)
            for name, value in contrib.payload:  # type: ignore[union-attr]
                fields[name] = value
        return Value.of_record(fields)

    def _aggregate_arms(self, node_id: str) -> list[tuple[str, Value | None]]:
        edges = sorted(self.in_index[node_id], key=lambda e: (self.layers[e.src], e.src, e.id))
        arms: list[tuple[str, Value | None]] = []
        for edge in edges:
            if edge.id in self.dead_edges or self.runs[edge.src].status == SKIPPED:
                arms.append((edge.id, None))
            else:
                arms.append((edge.id, self._edge_value(edge)))
        return arms

    # -- trace emission ------------------------------------------------------------

    def _emit(self, kind: str, node: str, digest: str) -> None:
        self.event_counter += 1
        self.trace.append(TraceEvent(self.event_counter, kind, node, digest))

    def _emit_node_events(self, node_id: str, retries: tuple[tuple[int, float], ...], output: Value | None, error: BaseException | None) -> None:
        self._emit("dispatch", node_id, canonical_digest(self.inputs[node_id]))
        for attempt, delay_ms in retries:
            self._emit("retry", node_id, digest_of({"attempt": attempt, "delay_ms": int(delay_ms)}))
        if error is not None:
            category = error.category if isinstance(error, DetflowError) else "framework"
            self._emit("error", node_id, digest_of({"category": category, "kind": type(error).__name__, "message": str(error)}))
        elif output is not None:
            self._emit("commit", node_id, canonical_digest(output))

    # -- apply steps (scheduler thread only) ------------------------------------------

    def _commit_output(self, node_id: str, output: Value) -> None:
        self.store.commit({node_id: output}, writer=node_id)
        self.values[node_id] = output

    def _apply_skip(self, node_id: str) -> None:
        self.runs[node_id].status = SKIPPED
        self._emit("skip", node_id, digest_of({"reason": "unselected-path"}))
        self._finish_apply(node_id)

    def _apply_control(self, node_id: str, node: Node) -> None:
        t0 = time.perf_counter()
        spec = node.spec
        if isinstance(spec, AggregateSpec):
            output = aggregate_join(spec, self._aggregate_arms(node_id), node_id)
            if output is None:
                self._apply_skip(node_id)
                return
        else:
            output = self._assemble_input(node_id)
        self.inputs[node_id] = output

        self._commit_output(node_id, output)
        run = self.runs[node_id]
        run.status = COMPLETED
        run.attempts = 1
        self._emit_node_events(node_id, (), output, None)

        if isinstance(spec, BranchSpec):
            snapshot = self.store.snapshot(self.guard_scopes[node_id])
            selected = route_branch(self.compiled_guards[node_id], snapshot, node_id)
            for guard in spec.guards:
                if guard.edge_id != selected:
                    self.dead_edges.add(guard.edge_id)
        run.framework_ms = (time.perf_counter() - t0) * 1000.0
        self._finish_apply(node_id)

    def _apply_completion(self, node_id: str, completion: _Completion) -> None:
        t0 = time.perf_counter()
        run = self.runs[node_id]
        run.attempts = completion.attempts
        run.external_ms = completion.external_ms
        self.model_errors += completion.model_errors
        if completion.error is not None:
            run.status = FAILED
            self._emit_node_events(node_id, completion.retries, None, completion.error)
            self.failure = (node_id, completion.error)
        else:
            output = completion.output
            assert output is not None
            self._commit_output(node_id, output)
            run.status = COMPLETED
            self._emit_node_events(node_id, completion.retries, output, None)
        run.framework_ms = max(completion.body_ms - completion.external_ms, 0.0) + (time.perf_counter() - t0) * 1000.0
        self._finish_apply(node_id)

    def _apply_control_failure(self, node_id: str, exc: DetflowError) -> None:
        self.runs[node_id].status = FAILED
        if node_id not in self.inputs:
            self.inputs[node_id] = Value.of_record({})
        self._emit_node_events(node_id, (), None, exc)
        self.failure = (node_id, exc)
        self._finish_apply(node_id)

    def _finish_apply(self, node_id: str) -> None:
        self.idx += 1
        self.applied_commits += 1
        if self.failure is None:
            self._propagate_terminal(node_id)
        if self.config.checkpoint_path is not None:
            self._write_checkpoint()

    def _write_checkpoint(self) -> None:
        if self.checkpointed_at == self.applied_commits:
            return
        cp = self.make_checkpoint()
        integrity = cp.save(self.config.checkpoint_path)  # type: ignore[arg-type]
        self.checkpointed_at = self.applied_commits
        self._emit("checkpoint", "", integrity)

    def make_checkpoint(self) -> Checkpoint:
        statuses = {}
        for node_id, run in self.runs.items():
            status = run.status
            if status in (READY, RUNNING):
                status = PENDING  # in-flight work is deliberately forgotten
            statuses[node_id] = status
        return Checkpoint(
            graph_hash=self.graph_hash,
            config_digest=self.config.digest(),
            state_schema=self.state_schema,
            history=self.store.history,
            statuses=tuple(sorted(statuses.items())),
            attempts=tuple(sorted((n, r.attempts) for n, r in self.runs.items() if r.attempts)),
            dead_edges=frozenset(self.dead_edges),
            trace=tuple(self.trace),
            event_counter=self.event_counter,
        )

    # -- resume --------------------------------------------------------------------

    def _restore(self, cp: Checkpoint) -> None:
        if cp.graph_hash != self.graph_hash:
            raise CheckpointIncompatible(
                f"checkpoint belongs to graph {cp.graph_hash[:12]}..., this graph is {self.graph_hash[:12]}..."
            )
        self.store = StateStore.fold(self.state_schema, cp.history)
        statuses = dict(cp.statuses)
        attempts = dict(cp.attempts)
        for node_id, run in self.runs.items():
            status = statuses.get(node_id, PENDING)
            if status in (READY, RUNNING):
                status = PENDING
            run.status = status
            run.attempts = attempts.get(node_id, 0)
        self.dead_edges = set(cp.dead_edges)
        self.trace = list(cp.trace)
        self.event_counter = cp.event_counter
        self.values = dict(self.store.current())
        while self.idx < len(self.order) and self.runs[self.order[self.idx]].status in TERMINAL:
            self.idx += 1
        for node_id in self.order[self.idx :]:
            if self.runs[node_id].status in TERMINAL:
                raise CheckpointCorrupt(
                    f"terminal node {node_id!r} follows a non-terminal one; checkpoint statuses are not an apply prefix"
                )
        # rebuild doom/resolution bookkeeping for the terminal prefix
        for node_id in self.order[: self.idx]:
            self._propagate_terminal(node_id)
        self._seed_resolution()

    # -- worker bodies (pool threads) --------------------------------------------------

    def _agent_body(self, node_id: str, spec: AgentSpec, inputs: Value, snapshot: StateSnapshot) -> None:
        clock = install_clock()
        start = time.perf_counter()
        retries: list[tuple[int, float]] = []
        model_errors = 0
        attempt = 0
        policy = self.config.recovery
        completion: _Completion
        try:
            while True:
                scratch = ScratchSpace((node_id, attempt))
                try:
                    outcome: AgentOutcome = run_agent(
                        node_id, spec, inputs, snapshot, self.provider, self.tools, scratch=scratch, cancel=self.cancel
                    )
                    model_errors += len(outcome.model_errors)
                    completion = _Completion(
                        node_id,
                        output=outcome.output,
                        retries=tuple(retries),
                        model_errors=model_errors,
                        attempts=attempt + 1,
                    )
                    break
                except CancelledRun as exc:
                    completion = _Completion(node_id, error=exc, retries=tuple(retries), attempts=attempt + 1)
                    break
                except Exception as exc:
                    model_errors += len(getattr(exc, "anomalies", ()))
                    action, delay_ms = apply_recovery(exc, policy, attempt)
                    if action == "fail":
                        completion = _Completion(
                            node_id, error=exc, retries=tuple(retries), model_errors=model_errors, attempts=attempt + 1
                        )
                        break
                    retries.append((attempt + 1, delay_ms))
                    self.messages.put(("heartbeat", node_id))
                    with external_section():
                        cancelled = self.cancel.wait(delay_ms / 1000.0)
                    if cancelled:
                        completion = _Completion(
                            node_id,
                            error=CancelledRun("cancelled during retry wait"),
                            retries=tuple(retries),
                            model_errors=model_errors,
                            attempts=attempt + 1,
                        )
                        break
                    attempt += 1
                finally:
                    scratch.close()
        finally:
            uninstall_clock()
        completion.body_ms = (time.perf_counter() - start) * 1000.0
        completion.external_ms = clock.total_ms
        self.messages.put(("done", completion))

    def _tool_body(self, node_id: str, spec: ToolSpec, inputs: Value) -> None:
        clock = install_clock()
        start = time.perf_counter()
        retries: list[tuple[int, float]] = []

        def on_retry(attempt: int, delay_ms: float) -> None:
            retries.append((attempt, delay_ms))
            self.messages.put(("heartbeat", node_id))

        try:
            output = run_tool_node(spec, inputs, self.tools, on_retry=on_retry, cancel=self.cancel)
            completion = _Completion(node_id, output=output, retries=tuple(retries), attempts=len(retries) + 1)
        except Exception as exc:
            completion = _Completion(node_id, error=exc, retries=tuple(retries), attempts=len(retries) + 1)
        finally:
            uninstall_clock()
        completion.body_ms = (time.perf_counter() - start) * 1000.0
        completion.external_ms = clock.total_ms
        self.messages.put(("done", completion))

    # -- dispatch -----------------------------------------------------------------------

    def _dispatch_ready(self, pool: ThreadPoolExecutor) -> None:
        while self.free_workers > 0 and self.dispatch_heap:
            _, node_id = heapq.heappop(self.dispatch_heap)
            node = self.graph.nodes[node_id]
            inputs, snapshot = self.captured.pop(node_id)
            self.inputs[node_id] = inputs
            self.runs[node_id].status = RUNNING
            self.free_workers -= 1
            if isinstance(node.spec, AgentSpec):
                pool.submit(self._agent_body, node_id, node.spec, inputs, snapshot)
            else:
                pool.submit(self._tool_body, node_id, node.spec, inputs)

    # -- the loop --------------------------------------------------------------------------

    def run(self) -> ExecutionResult:
        pool = ThreadPoolExecutor(max_workers=self.config.worker_limit, thread_name_prefix="detflow-worker")
        last_event = time.monotonic()
        try:
            while self.idx < len(self.order):
                progressed = False
                while self.idx < len(self.order) and self.failure is None:
                    if self.config.stop_after_commits is not None and self.applied_commits >= self.config.stop_after_commits:
                        self.stopped_early = True
                        break
                    node_id = self.order[self.idx]
                    run = self.runs[node_id]
                    if run.status in TERMINAL:
                        self.idx += 1
                        continue
                    node = self.graph.nodes[node_id]
                    if node_id in self.doomed:
                        self._apply_skip(node_id)
                    elif node_id in self.capture_errors:
                        self._apply_control_failure(node_id, self.capture_errors.pop(node_id))
                    elif not isinstance(node.spec, (AgentSpec, ToolSpec)):
                        if isinstance(node.spec, AggregateSpec) and not self.in_index[node_id]:
                            raise InternalInvariantError(f"aggregate {node_id!r} with no in-edges survived validation")
                        try:
                            self._apply_control(node_id, node)
                        except (NoBranchTaken, AggregateUnsatisfiable, SchemaViolation, ToolFailed, EvalError) as exc:
                            self._apply_control_failure(node_id, exc)
                    elif node_id in self.buffered:
                        self._apply_completion(node_id, self.buffered.pop(node_id))
                    else:
                        break  # the pointer waits on a worker
                    progressed = True
                if self.stopped_early:
                    if self.config.checkpoint_path is not None:
                        self._write_checkpoint()
                    break
                if self.failure is not None or self.idx >= len(self.order):
                    break
                self._dispatch_ready(pool)
                if progressed:
                    last_event = time.monotonic()
                    continue
                running = frozenset(n for n, r in self.runs.items() if r.status == RUNNING and n not in self.buffered)
                if not running and self.order[self.idx] not in self.buffered:
                    raise InternalInvariantError(
                        f"structural deadlock at node {self.order[self.idx]!r}: nothing running, nothing applicable"
                    )
                remaining = self.config.watchdog_ms / 1000.0 - (time.monotonic() - last_event)
                if remaining > 0:
                    try:
                        message = self.messages.get(timeout=remaining)
                    except queue.Empty:
                        message = None
                else:
                    message = None
                if message is None:
                    stall = detect_stall(running, last_event, self.config.watchdog_ms, time.monotonic())
                    if stall is not None:
                        raise stall
                    last_event = time.monotonic()
                    continue
                last_event = time.monotonic()
                if message[0] == "done":
                    completion: _Completion = message[1]
                    self.buffered[completion.node_id] = completion
                    self.free_workers += 1
                # heartbeats only feed the watchdog
        finally:
            self.cancel.set()
            pool.shutdown(wait=True)

        metrics = self._metrics()
        # in-flight work was abandoned, not applied; report it as pending,
        # matching what a checkpoint records and what resume will see
        statuses = {n: (PENDING if r.status in (READY, RUNNING) else r.status) for n, r in self.runs.items()}
        result = ExecutionResult(
            snapshot=self.store.snapshot(),
            trace=ExecutionTrace(self.trace),
            metrics=metrics,
            statuses=statuses,
            stopped_early=self.stopped_early,
        )
        if self.failure is not None:
            node_id, cause = self.failure
            metrics.tasks_failed = 1
            if not isinstance(cause, DetflowError) or cause.category == "framework":
                metrics.framework_errors += 1
            raise ExecutionFailed(node_id, cause, result)
        return result

    def _metrics(self) -> Metrics:
        m = Metrics(per_node=dict(self.runs))
        executed = [r for r in self.runs.values() if r.status in (COMPLETED, FAILED)]
        m.framework_ms_total = sum(r.framework_ms for r in executed)
        m.external_ms_total = sum(r.external_ms for r in executed)
        if executed:
            m.mean_processing_ms = m.framework_ms_total / len(executed)
            if m.mean_processing_ms > 0:
                m.throughput_opm = throughput_opm(m.mean_processing_ms)
        m.model_errors = self.model_errors
        if self.config.collect_metrics:
            try:
                import psutil

                m.peak_memory_bytes = psutil.Process().memory_info().rss
            except Exception:
                m.peak_memory_bytes = 0
        return m


# --- public entry points -----------------------------------------------------------------


def execute(
    graph: WorkflowGraph,
    initial_state: Mapping[str, Value] | None = None,
    config: ExecutionConfig | None = None,
    provider: Provider | None = None,
    tools: ToolRegistry | None = None,
    *,
    transforms: TransformRegistry | None = None,
    entry_schema: Schema | None = None,
) -> ExecutionResult:
    """Run a validated workflow to terminal statuses.

    Raises ValidationFailed, SchemaViolation (bad initial state), StallError,
    or ExecutionFailed carrying the partial result.
    """
    run = _Run(
        graph,
        initial_state or {},
        config or ExecutionConfig(),
        provider if provider is not None else MockProvider(),
        tools if tools is not None else default_tool_registry(),
        transforms,
        entry_schema,
    )
    return run.run()


def resume(
    checkpoint: Checkpoint | str,
    graph: WorkflowGraph,
    config: ExecutionConfig | None = None,
    provider: Provider | None = None,
    tools: ToolRegistry | None = None,
    *,
    transforms: TransformRegistry | None = None,
    entry_schema: Schema | None = None,
) -> ExecutionResult:
    """Continue an interrupted run. The graph's canonical hash must match the
    checkpoint's; already-terminal nodes are not re-executed."""
    cp = Checkpoint.load(checkpoint) if isinstance(checkpoint, str) else checkpoint
    run = _Run(
        graph,
        {},
        config or ExecutionConfig(),
        provider if provider is not None else MockProvider(),
        tools if tools is not None else default_tool_registry(),
        transforms,
        entry_schema,
        checkpoint=cp,
    )
    return run.run()
