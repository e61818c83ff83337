"""Node execution: the agent loop and native tool invocation.

The guarantees that make model misbehavior harmless live here. A tool call
naming anything outside the node's declared tool set is recorded as a model
error and answered with a structured refusal; it is never executed and never
influences routing. Final output is parsed strictly against the node's
output schema; malformed finals burn an iteration and earn a refusal, so a
flaky model gets max_iterations chances and then fails loudly.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .errors import (
    CancelledRun,
    DuplicateTool,
    IterationLimitExceeded,
    OutputSchemaViolation,
    ToolFailed,
    ToolOutputSchemaViolation,
    ToolTimeout,
    UnknownTool,
)
from .graph import DEFAULT_TOOL_TIMEOUT_MS, AgentSpec, ToolSpec
from .memory import ConnectorHub, ScratchSpace, StateSnapshot
from .providers import (
    Provider,
    ProviderRequest,
    ProviderResponse,
    ToolDef,
)
from .recovery import FailFast, RecoveryPolicy, Retry, retry_delay_ms, total_attempts
from .values import (
    PlainDecodeError,
    Schema,
    Value,
    record_conform_error,
    record_from_plain,
    schema_descriptor,
    to_plain,
)

# --- external-time accounting -------------------------------------------------

_LOCAL = threading.local()


class ExternalClock:
    """Accumulates wall time spent inside providers and tool bodies, so the
    engine can report pure framework overhead. Installed per worker thread."""

    def __init__(self):
        self.total_ms = 0.0


def install_clock() -> ExternalClock:
    clock = ExternalClock()
    _LOCAL.clock = clock
    return clock


def uninstall_clock() -> None:
    _LOCAL.clock = None


class _External:
    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        clock = getattr(_LOCAL, "clock", None)
        if clock is not None:
            clock.total_ms += (time.perf_counter() - self._start) * 1000.0
        return False


def external_section() -> _External:
    return _External()


# --- tool registry -----------------------------------------------------------------


@dataclass(frozen=True)
class ToolEntry:
    name: str
    input_schema: Schema
    output_schema: Schema
    fn: Callable[[Value], Value]
    timeout_ms: int = DEFAULT_TOOL_TIMEOUT_MS
    description: str = ""


class ToolRegistry:
    """Named native functions with typed boundaries."""

    def __init__(self):
        self._entries: dict[str, ToolEntry] = {}

    def register(
        self,
        name: str,
        fn: Callable[[Value], Value],
        input_schema: Schema,
        output_schema: Schema,
        *,
        timeout_ms: int = DEFAULT_TOOL_TIMEOUT_MS,
        description: str = "",
    ) -> None:
        if name in self._entries:
            raise DuplicateTool(f"tool {name!r} already registered")
        self._entries[name] = ToolEntry(name, input_schema, output_schema, fn, timeout_ms, description)

    def has(self, name: str) -> bool:
        return name in self._entries

    def get(self, name: str) -> ToolEntry:
        entry = self._entries.get(name)
        if entry is None:
            raise UnknownTool(f"no tool {name!r}")
        return entry

    def schemas(self, name: str) -> tuple[Schema, Schema]:
        entry = self.get(name)
        return entry.input_schema, entry.output_schema

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._entries))


# --- tool execution -----------------------------------------------------------------


class _ToolRun:
    """One tool function invocation on a daemon thread so a hung body cannot
    wedge the engine; timeout bounds waiting, not the body itself (documented
    cooperative limitation of in-process tools)."""

    def __init__(self, fn: Callable[[Value], Value], args: Value):
        self.result: Value | None = None
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._run, args=(fn, args), daemon=True)

    def _run(self, fn, args):
        try:
            self.result = fn(args)
        except BaseException as exc:
            self.error = exc

    def wait(self, timeout_ms: int) -> Value:
        self.thread.start()
        self.thread.join(timeout_ms / 1000.0)
        if self.thread.is_alive():
            raise ToolTimeout(f"tool exceeded {timeout_ms} ms")
        if self.error is not None:
            raise ToolFailed(str(self.error)) from self.error
        return self.result  # type: ignore[return-value]


def run_tool(
    entry: ToolEntry,
    args: Value,
    *,
    timeout_ms: int | None = None,
    retry: RecoveryPolicy | None = None,
    on_retry: Callable[[int, float], None] | None = None,
    cancel: threading.Event | None = None,
) -> Value:
    """Validate args, execute under a wall-clock timeout with the retry
    policy, and validate the produced record.

    Raises ToolFailed / ToolTimeout after the policy is exhausted and
    ToolOutputSchemaViolation when the (final) result does not conform.
    """
    err = record_conform_error(args, entry.input_schema)
    if err:
        raise ToolFailed(f"arguments do not conform to {entry.name!r} input schema: {err}")

    budget_ms = entry.timeout_ms if timeout_ms is None else timeout_ms
    policy = retry if retry is not None else FailFast()
    attempts = total_attempts(policy)
    attempt = 0
    while True:
        if cancel is not None and cancel.is_set():
            raise CancelledRun("cancelled before tool attempt")
        try:
            with external_section():
                result = _ToolRun(entry.fn, args).wait(budget_ms)
            break
        except (ToolFailed, ToolTimeout) as exc:
            if attempt + 1 >= attempts:
                raise
            assert isinstance(policy, Retry)
            delay_ms = retry_delay_ms(policy, attempt)
            if on_retry is not None:
                on_retry(attempt + 1, delay_ms)
            with external_section():
                if cancel is not None:
                    if cancel.wait(delay_ms / 1000.0):
                        raise CancelledRun("cancelled during retry wait") from exc
                else:
                    time.sleep(delay_ms / 1000.0)
            attempt += 1

    if result is None or not isinstance(result, Value):
        raise ToolOutputSchemaViolation(f"tool {entry.name!r} returned {type(result).__name__}, expected a record Value")
    err = record_conform_error(result, entry.output_schema)
    if err:
        raise ToolOutputSchemaViolation(f"tool {entry.name!r} output: {err}")
    return result


def run_tool_node(
    spec: ToolSpec,
    args: Value,
    tools: ToolRegistry,
    *,
    on_retry: Callable[[int, float], None] | None = None,
    cancel: threading.Event | None = None,
) -> Value:
    """Execute a tool node: the node's own timeout and retry policy apply."""
    entry = tools.get(spec.fn_ref)
    return run_tool(entry, args, timeout_ms=spec.timeout_ms, retry=spec.retry, on_retry=on_retry, cancel=cancel)


# --- structured output ----------------------------------------------------------------


def parse_structured_output(text: str, schema: Schema) -> Value:
    """Strictly parse a model's final text as a record of ``schema``.

    The text must be a single JSON object with exactly the declared fields;
    no coercions, no extras, no NaN literals.
    """

    def _reject_const(_):
        raise ValueError("non-finite JSON literals are not accepted")

    try:
        obj = json.loads(text, parse_constant=_reject_const)
    except (ValueError, json.JSONDecodeError) as exc:
        raise OutputSchemaViolation(f"final text is not valid JSON: {exc}") from exc
    try:
        return record_from_plain(obj, schema)
    except PlainDecodeError as exc:
        raise OutputSchemaViolation(str(exc)) from exc


# --- agent loop -------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelAnomaly:
    kind: str  # unknown-tool | bad-arguments | malformed-output
    detail: str
    iteration: int


@dataclass(frozen=True)
class ToolInvocation:
    tool: str
    args: Value
    result: Value
    iteration: int


@dataclass(frozen=True)
class AgentOutcome:
    output: Value
    iterations_used: int
    tool_invocations: tuple[ToolInvocation, ...]
    model_errors: tuple[ModelAnomaly, ...]
    prompt_tokens: int = 0
    completion_tokens: int = 0


def assemble_context(
    node_id: str,
    spec: AgentSpec,
    inputs: Value,
    snapshot: StateSnapshot,
    tools: ToolRegistry,
) -> ProviderRequest:
    """Build the initial provider request: system prompt (with the output
    contract appended), the serialized input record, and only the declared
    state reads that are present. Nothing else ever enters the context."""
    system = (
        spec.system_prompt
        + "\n\nRespond with a single JSON object with exactly these fields: "
        + json.dumps(schema_descriptor(spec.output_schema), sort_keys=True)
    )
    messages: list[tuple[str, str]] = [("system", system)]
    messages.append(("user", "input: " + json.dumps(to_plain(inputs), sort_keys=True)))
    state_lines = []
    for key in sorted(spec.declared_state_reads):
        if key in snapshot.keys():
            state_lines.append(f"state.{key} = {json.dumps(to_plain(snapshot.read(key)), sort_keys=True)}")
    if state_lines:
        messages.append(("user", "\n".join(state_lines)))
    tool_defs = tuple(
        ToolDef(name, tools.get(name).input_schema, tools.get(name).description) for name in sorted(spec.tool_refs)
    )
    return ProviderRequest(
        node_id=node_id,
        iteration=1,
        messages=tuple(messages),
        tool_defs=tool_defs,
        required_output_schema=spec.output_schema,
    )


def run_agent(
    node_id: str,
    spec: AgentSpec,
    inputs: Value,
    snapshot: StateSnapshot,
    provider: Provider,
    tools: ToolRegistry,
    scratch: ScratchSpace | None = None,
    cancel: threading.Event | None = None,
) -> AgentOutcome:
    """Drive the model/tool loop for up to max_iterations.

    Unknown or malformed tool calls are refused in-band; the model's only
    path to completion is a final text that parses against the output
    schema. Raises OutputSchemaViolation or IterationLimitExceeded when the
    budget runs out."""
    base = assemble_context(node_id, spec, inputs, snapshot, tools)
    transcript: list[tuple[str, str]] = list(base.messages)
    invocations: list[ToolInvocation] = []
    anomalies: list[ModelAnomaly] = []
    prompt_tokens = completion_tokens = 0
    last_final_error: str | None = None

    for iteration in range(1, spec.max_iterations + 1):
        if cancel is not None and cancel.is_set():
            raise CancelledRun(f"agent {node_id!r} cancelled")
        request = ProviderRequest(
            node_id=node_id,
            iteration=iteration,
            messages=tuple(transcript),
            tool_defs=base.tool_defs,
            required_output_schema=spec.output_schema,
            temperature=base.temperature,
            max_tokens=base.max_tokens,
        )
        with external_section():
            response = provider.complete(request)
        prompt_tokens += response.prompt_tokens
        completion_tokens += response.completion_tokens

        if response.final_text is not None:
            try:
                output = parse_structured_output(response.final_text, spec.output_schema)
            except OutputSchemaViolation as exc:
                last_final_error = str(exc)
                anomalies.append(ModelAnomaly("malformed-output", str(exc), iteration))
                transcript.append(("assistant", response.final_text))
                transcript.append(
                    (
                        "user",
                        "output rejected: "
                        + str(exc)
                        + "; respond with a single JSON object with exactly these fields: "
                        + json.dumps(schema_descriptor(spec.output_schema), sort_keys=True),
                    )
                )
                continue
            if scratch is not None:
                scratch.put("final", output)
            return AgentOutcome(
                output=output,
                iterations_used=iteration,
                tool_invocations=tuple(invocations),
                model_errors=tuple(anomalies),
                prompt_tokens=prompt_tokens,
                completion_tokens=completion_tokens,
            )

        last_final_error = None
        for call in response.tool_calls or ():
            if call.name not in spec.tool_refs:
                anomalies.append(ModelAnomaly("unknown-tool", call.name, iteration))
                transcript.append(
                    (
                        "user",
                        f"refused: no tool named {call.name!r} is available; "
                        f"available tools: {', '.join(sorted(spec.tool_refs)) or '<none>'}",
                    )
                )
                continue
            entry = tools.get(call.name)
            if call.args is None or record_conform_error(call.args, entry.input_schema) is not None:
                detail = (
                    record_conform_error(call.args, entry.input_schema)
                    if call.args is not None
                    else f"arguments are not a well-formed record: {call.args_text[:80]}"
                )
                anomalies.append(ModelAnomaly("bad-arguments", f"{call.name}: {detail}", iteration))
                transcript.append(
                    (
                        "user",
                        f"refused: arguments for {call.name!r} are invalid ({detail}); expected fields "
                        + json.dumps(schema_descriptor(entry.input_schema), sort_keys=True),
                    )
                )
                continue
            transcript.append(("assistant", f"call {call.name}({json.dumps(to_plain(call.args), sort_keys=True)})"))
            try:
                result = run_tool(entry, call.args, cancel=cancel)
            except CancelledRun:
                raise
            except Exception as exc:
                transcript.append(("user", f"tool {call.name!r} failed: {exc}"))
                continue
            invocations.append(ToolInvocation(call.name, call.args, result, iteration))
            if scratch is not None:
                scratch.put(f"tool:{len(invocations)}", result)
            transcript.append(("user", f"tool {call.name} returned: {json.dumps(to_plain(result), sort_keys=True)}"))

    if last_final_error is not None:
        exc = OutputSchemaViolation(
            f"agent {node_id!r} produced no conforming output in {spec.max_iterations} iterations: {last_final_error}"
        )
    else:
        exc = IterationLimitExceeded(f"agent {node_id!r} exhausted {spec.max_iterations} iterations without a final answer")
    exc.anomalies = tuple(anomalies)  # type: ignore[attr-defined]
    exc.invocations = tuple(invocations)  # type: ignore[attr-defined]
    raise exc


# --- built-in tools ----------------------------------------------------------------------


def default_tool_registry(hub: ConnectorHub | None = None) -> ToolRegistry:
    """The stock tools: arithmetic, string joining, sleeping, scripted
    failure, no-op, and (when a hub is supplied) file/HTTP access."""
    from .values import BYTES, INT, STRING

    reg = ToolRegistry()

    def add(args: Value) -> Value:
        return Value.of_record({"sum": Value.of_int(args.field("a").payload + args.field("b").payload)})  # type: ignore[operator]

    reg.register(
        "add",
        add,
        Schema({"a": INT, "b": INT}),
        Schema({"sum": INT}),
        description="Add two integers.",
    )

    def concat(args: Value) -> Value:
        return Value.of_record({"text": Value.of_string(args.field("left").payload + args.field("right").payload)})  # type: ignore[operator]

    reg.register(
        "concat",
        concat,
        Schema({"left": STRING, "right": STRING}),
        Schema({"text": STRING}),
        description="Concatenate two strings.",
    )

    def sleep_ms(args: Value) -> Value:
        ms = args.field("ms").payload
        time.sleep(ms / 1000.0)  # type: ignore[operator]
        return Value.of_record({"slept_ms": Value.of_int(ms)})  # type: ignore[arg-type]

    reg.register(
        "sleep_ms",
        sleep_ms,
        Schema({"ms": INT}),
        Schema({"slept_ms": INT}),
        description="Sleep for the given number of milliseconds.",
    )

    def noop(_: Value) -> Value:
        return Value.of_record({})

    reg.register("noop", noop, Schema(), Schema(), description="Do nothing.")

    fail_counts: dict[str, int] = {}
    fail_lock = threading.Lock()

    def fail_n(args: Value) -> Value:
        key = args.field("key").payload
        n = args.field("n").payload
        with fail_lock:
            calls = fail_counts.get(key, 0) + 1  # type: ignore[arg-type]
            fail_counts[key] = calls  # type: ignore[index]
        if calls <= n:  # type: ignore[operator]
            raise RuntimeError(f"scripted failure {calls}/{n}")
        return Value.of_record({"calls": Value.of_int(calls)})

    reg.register(
        "fail_n",
        fail_n,
        Schema({"key": STRING, "n": INT}),
        Schema({"calls": INT}),
        description="Fail the first n calls per key, then succeed.",
    )

    if hub is not None:
        if hub.has("file"):

            def file_read(args: Value) -> Value:
                return hub.call("file", args)

            reg.register(
                "file_read",
                file_read,
                Schema({"path": STRING}),
                Schema({"content": BYTES}),
                description="Read a file's raw contents.",
            )
        if hub.has("http"):

            def http_fetch(args: Value) -> Value:
                request = Value.of_record(
                    {
                        "method": Value.of_string("GET"),
                        "url": args.field("url"),
                        "headers": Value.of_string(""),
                        "body": Value.of_bytes(b""),
                    }
                )
                return hub.call("http", request)

            reg.register(
                "http_fetch",
                http_fetch,
                Schema({"url": STRING}),
                Schema({"status": INT, "body": BYTES}),
                description="GET a URL and return status and body.",
            )
    return reg
