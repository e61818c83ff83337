"""Command-line front end: validate, run, resume, bench, export, hash.

Exit codes: 0 success, 1 execution/framework error, 2 validation or input
file error.
"""

from __future__ import annotations

import json
import sys

import click

from .docio import (
    WorkflowDocument,
    build_tool_registry,
    export_dot,
    load_state,
    load_transcript,
    load_workflow,
    save_state_file,
)
from .engine import (
    BatchReport,
    ExecutionConfig,
    ExecutionResult,
    Metrics,
    execute,
    resume as engine_resume,
)
from .errors import DetflowError, ExecutionFailed, ParseFailure, SchemaViolation, ValidationFailed
from .graph import (
    REQUIRE_ALL,
    AgentSpec,
    AggregateSpec,
    FanOutSpec,
    RecordOf,
    ToolSpec,
    WorkflowGraph,
    validate as validate_graph,
)
from .providers import HttpProvider, MockProvider, Provider, final, tool_call
from .values import (
    INT,
    STRING,
    Schema,
    Value,
    canonical_bytes,
    value_from_canonical_obj,
)

VALIDATION_EXIT = 2
RUNTIME_EXIT = 1


def _fail(code: int, message: str) -> "click.exceptions.Exit":
    click.echo(f"error: {message}", err=True)
    return click.exceptions.Exit(code)


def _build_provider(
    name: str,
    seed: int,
    transcript: str | None,
    base_url: str | None,
    model: str | None,
    api_key_env: str,
) -> Provider:
    if name == "mock":
        script = load_transcript(transcript) if transcript else {}
        return MockProvider(script=script)
    if name == "fuzz":
        return MockProvider(fuzz_seed=seed)
    if not base_url or not model:
        raise _fail(VALIDATION_EXIT, "http provider requires --base-url and --model")
    return HttpProvider(base_url=base_url, model=model, api_key_env=api_key_env)


def _metrics_report(doc_name: str, status: str, metrics: Metrics, statuses: dict[str, str]) -> str:
    completed = sum(1 for s in statuses.values() if s == "completed")
    skipped = sum(1 for s in statuses.values() if s == "skipped")
    failed = sum(1 for s in statuses.values() if s == "failed")
    lines = [
        f"workflow: {doc_name}",
        f"status: {status}",
        f"nodes: {completed} completed, {skipped} skipped, {failed} failed",
        f"framework_ms_total: {metrics.framework_ms_total:.3f}",
        f"external_ms_total: {metrics.external_ms_total:.3f}",
        f"mean_processing_ms: {metrics.mean_processing_ms:.3f}",
        f"throughput_opm: {metrics.throughput_opm:.1f}",
        f"framework_errors: {metrics.framework_errors}",
        f"model_errors: {metrics.model_errors}",
        f"tasks_failed: {metrics.tasks_failed}",
        "",
        "JSON: " + json.dumps(metrics.to_obj(), sort_keys=True),
    ]
    return "\n".join(lines) + "\n"


def _write_outputs(
    doc: WorkflowDocument,
    result: ExecutionResult,
    status: str,
    metrics_out: str | None,
    trace_out: str | None,
    state_out: str | None,
) -> None:
    if trace_out:
        with open(trace_out, "w", encoding="utf-8") as fh:
            fh.write(result.trace.to_text())
    if state_out:
        save_state_file(result.snapshot, state_out)
    if metrics_out:
        with open(metrics_out, "w", encoding="utf-8") as fh:
            fh.write(_metrics_report(doc.graph.name, status, result.metrics, result.statuses))


@click.group()
def main() -> None:
    """Deterministic workflow engine for agent pipelines."""


@main.command("validate")
@click.argument("workflow", type=click.Path(exists=True, dir_okay=False))
def cmd_validate(workflow: str) -> None:
    """Check a workflow document; exit 2 with findings when not executable."""
    try:
        doc = load_workflow(workflow, check=False)
    except ParseFailure as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    registry = build_tool_registry(doc.tools)
    report = validate_graph(doc.graph, tools=registry, entry_state=doc.entry_schema)
    if not report.ok:
        for finding in report.findings:
            click.echo(str(finding), err=True)
        raise click.exceptions.Exit(VALIDATION_EXIT)
    for finding in report.warnings():
        click.echo(str(finding))
    click.echo(f"ok: {doc.hash()}")


_RUN_FLAGS = [
    click.option("--provider", "provider_name", type=click.Choice(["mock", "fuzz", "http"]), default=None),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--workers", type=int, default=4, show_default=True),
    click.option("--watchdog-ms", type=int, default=120_000, show_default=True),
    click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None),
    click.option("--state", "state_path", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--metrics-out", type=click.Path(dir_okay=False), default=None),
    click.option("--trace-out", type=click.Path(dir_okay=False), default=None),
    click.option("--state-out", type=click.Path(dir_okay=False), default=None),
    click.option("--transcript", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--tool-server", default=None, help="Base URL of a foreign-tool HTTP bridge."),
    click.option("--base-url", default=None, help="http provider: chat-completions base URL."),
    click.option("--model", default=None, help="http provider: model name."),
    click.option("--api-key-env", default="OPENAI_API_KEY", show_default=True),
    click.option("--stop-after-commits", type=int, default=None, hidden=True),
]


def _with_run_flags(fn):
    for flag in reversed(_RUN_FLAGS):
        fn = flag(fn)
    return fn


def _run_common(
    doc: WorkflowDocument,
    checkpoint_to_resume: str | None,
    provider_name: str | None,
    seed: int,
    workers: int,
    watchdog_ms: int,
    checkpoint_path: str | None,
    state_path: str | None,
    metrics_out: str | None,
    trace_out: str | None,
    state_out: str | None,
    transcript: str | None,
    tool_server: str | None,
    base_url: str | None,
    model: str | None,
    api_key_env: str,
    stop_after_commits: int | None,
) -> None:
    if provider_name is None:
        provider_name = (doc.provider or {}).get("kind", "mock")
    provider = _build_provider(provider_name, seed, transcript, base_url, model, api_key_env)
    tools = build_tool_registry(doc.tools, tool_server=tool_server)
    config = ExecutionConfig(
        worker_limit=workers,
        watchdog_ms=watchdog_ms,
        checkpoint_path=checkpoint_path,
        seed=seed,
        stop_after_commits=stop_after_commits,
    )
    initial = load_state(state_path, doc.entry_schema) if state_path else {}
    try:
        if checkpoint_to_resume is None:
            result = execute(doc.graph, initial, config, provider, tools, entry_schema=doc.entry_schema)
        else:
            result = engine_resume(checkpoint_to_resume, doc.graph, config, provider, tools, entry_schema=doc.entry_schema)
    except ExecutionFailed as exc:
        result = exc.result
        if result is not None:
            _write_outputs(doc, result, f"failed: {exc}", metrics_out, trace_out, state_out)
            click.echo(f"graph_hash: {doc.hash()}")
            click.echo(f"trace_digest: {result.trace.digest()}")
        raise _fail(RUNTIME_EXIT, str(exc))
    status = "stopped" if result.stopped_early else "ok"
    _write_outputs(doc, result, status, metrics_out, trace_out, state_out)
    click.echo(f"graph_hash: {doc.hash()}")
    click.echo(f"trace_digest: {result.trace.digest()}")
    click.echo(f"status: {status}")


@main.command("run")
@click.argument("workflow", type=click.Path(exists=True, dir_okay=False))
@_with_run_flags
def cmd_run(workflow: str, **kwargs) -> None:
    """Execute a workflow document."""
    try:
        doc = load_workflow(workflow, tool_server=kwargs.get("tool_server"))
    except ParseFailure as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    except ValidationFailed as exc:
        for finding in exc.report.errors():
            click.echo(str(finding), err=True)
        raise click.exceptions.Exit(VALIDATION_EXIT)
    try:
        _run_common(doc, None, **kwargs)
    except (ParseFailure, SchemaViolation, ValidationFailed) as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    except DetflowError as exc:
        raise _fail(RUNTIME_EXIT, str(exc))


@main.command("resume")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("workflow", type=click.Path(exists=True, dir_okay=False))
@_with_run_flags
def cmd_resume(checkpoint: str, workflow: str, **kwargs) -> None:
    """Continue an interrupted run from its checkpoint file."""
    try:
        doc = load_workflow(workflow, tool_server=kwargs.get("tool_server"))
    except ParseFailure as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    except ValidationFailed as exc:
        for finding in exc.report.errors():
            click.echo(str(finding), err=True)
        raise click.exceptions.Exit(VALIDATION_EXIT)
    try:
        _run_common(doc, checkpoint, **kwargs)
    except (ParseFailure, SchemaViolation, ValidationFailed) as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    except DetflowError as exc:
        raise _fail(RUNTIME_EXIT, str(exc))


# --- bench ------------------------------------------------------------------------------


def _chain_graph(n: int) -> WorkflowGraph:
    g = WorkflowGraph("bench-chain")
    for i in range(n):
        g.add(f"s{i:04d}", ToolSpec("noop", Schema(), Schema()))
    for i in range(n - 1):
        g.connect(f"s{i:04d}", f"s{i + 1:04d}")
    return g


def _fanout_graph(n: int) -> tuple[WorkflowGraph, Schema]:
    g = WorkflowGraph("bench-fanout")
    entry = Schema({"task": STRING})
    plan = Schema({"plan": STRING})
    worker_out = Schema({"result": STRING})
    g.add("plan", AgentSpec("Decompose the task.", entry, plan))
    g.add("spread", FanOutSpec(plan))
    g.add("join", AggregateSpec(REQUIRE_ALL))
    g.connect("plan", "spread")
    arm_edges = []
    for i in range(n):
        wid = f"w{i:03d}"
        g.add(wid, AgentSpec("Solve one subtask.", plan, worker_out))
        g.connect("spread", wid)
        g.connect(wid, "join", edge_id=f"arm{i:03d}")
        arm_edges.append(f"arm{i:03d}")
    synth_in = Schema({eid: RecordOf(worker_out) for eid in arm_edges})
    g.add("synth", AgentSpec("Combine the results.", synth_in, Schema({"answer": STRING})))
    g.connect("join", "synth")
    return g, entry


def _agentic_graph(n: int) -> tuple[WorkflowGraph, dict]:
    g = WorkflowGraph("bench-agentic")
    io = Schema({"r": INT})
    script: dict = {}
    for i in range(n):
        aid = f"a{i:03d}"
        g.add(aid, AgentSpec("Add the numbers.", io, io, tool_refs=frozenset({"add"}), max_iterations=3))
        script[(aid, 1)] = tool_call("add", Value.of_record({"a": Value.of_int(i), "b": Value.of_int(1)}))
        script[(aid, 2)] = final(json.dumps({"r": i + 1}))
    for i in range(n - 1):
        g.connect(f"a{i:03d}", f"a{i + 1:03d}")
    return g, script


@main.command("bench")
@click.option("--scenario", type=click.Choice(["chain", "fanout", "agentic"]), default="chain", show_default=True)
@click.option("--size", type=int, default=50, show_default=True)
@click.option("--repetitions", type=int, default=3, show_default=True)
@click.option("--provider", "provider_name", type=click.Choice(["mock", "fuzz"]), default="mock", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=4, show_default=True)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
def cmd_bench(scenario: str, size: int, repetitions: int, provider_name: str, seed: int, workers: int, metrics_out: str | None) -> None:
    """Measure framework overhead on synthetic workflows."""
    if size < 1 or repetitions < 1:
        raise _fail(VALIDATION_EXIT, "size and repetitions must be >= 1")
    script: dict = {}
    initial: dict[str, Value] = {}
    if scenario == "chain":
        graph = _chain_graph(size)
    elif scenario == "fanout":
        graph, entry = _fanout_graph(size)
        initial = {"task": Value.of_string("bench")}
    else:
        graph, script = _agentic_graph(size)
        initial = {"r": Value.of_int(0)}

    report = BatchReport()
    samples: list[float] = []
    for rep in range(repetitions):
        if provider_name == "fuzz":
            provider: Provider = MockProvider(fuzz_seed=seed + rep)
        else:
            provider = MockProvider(script=script)
        config = ExecutionConfig(worker_limit=workers, seed=seed + rep)
        try:
            result = execute(graph, initial, config, provider)
            metrics = result.metrics
        except ExecutionFailed as exc:
            if exc.result is None:
                raise _fail(RUNTIME_EXIT, str(exc))
            metrics = exc.result.metrics
        report.add(metrics)
        samples.append(metrics.framework_ms_total)
    report.finish(samples)

    lines = [
        f"scenario: {scenario} size={size} reps={repetitions} provider={provider_name}",
        f"runs: {report.runs} ({report.failed} failed)",
        f"mean_processing_ms: {report.mean_processing_ms:.3f}",
        f"throughput_opm: {report.throughput:.1f}",
        f"hallucination_rate: {report.hallucination_rate:.4f}",
        f"framework_share_of_failures: {report.framework_share_of_failures:.4f}",
        f"model_error_events: {report.model_error_events}",
        "",
        "JSON: " + json.dumps(report.to_obj(), sort_keys=True),
    ]
    text = "\n".join(lines) + "\n"
    click.echo(text, nl=False)
    if metrics_out:
        with open(metrics_out, "w", encoding="utf-8") as fh:
            fh.write(text)


@main.command("export-dot")
@click.argument("workflow", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None)
def cmd_export_dot(workflow: str, out: str | None) -> None:
    """Emit a Graphviz description of the workflow."""
    try:
        doc = load_workflow(workflow)
    except ParseFailure as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    except ValidationFailed as exc:
        for finding in exc.report.errors():
            click.echo(str(finding), err=True)
        raise click.exceptions.Exit(VALIDATION_EXIT)
    text = export_dot(doc.graph)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)


@main.command("hash")
@click.argument("workflow", type=click.Path(exists=True, dir_okay=False))
def cmd_hash(workflow: str) -> None:
    """Print the document's canonical graph hash (no validation)."""
    try:
        doc = load_workflow(workflow, check=False)
    except ParseFailure as exc:
        raise _fail(VALIDATION_EXIT, str(exc))
    click.echo(doc.hash())


@main.command("canon")
@click.option("--check", is_flag=True, default=False, help="Exit 1 unless every input line is already canonical.")
def cmd_canon(check: bool) -> None:
    """Round-trip canonical values: one JSON value encoding per stdin line,
    re-encoded canonically on stdout. Used to verify foreign encoders."""
    ok = True
    for lineno, raw in enumerate(sys.stdin.buffer.read().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            value = value_from_canonical_obj(json.loads(raw))
        except Exception as exc:
            raise _fail(VALIDATION_EXIT, f"line {lineno}: {exc}")
        encoded = canonical_bytes(value)
        if check and encoded != raw:
            ok = False
            click.echo(f"line {lineno}: not canonical", err=True)
        sys.stdout.buffer.write(encoded)
        sys.stdout.buffer.write(b"\n")
    sys.stdout.buffer.flush()
    if check and not ok:
        raise click.exceptions.Exit(RUNTIME_EXIT)


if __name__ == "__main__":
    main()
