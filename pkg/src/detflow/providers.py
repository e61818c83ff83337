"""Model providers behind one interface.

MockProvider is fully deterministic: scripted responses keyed by
(node id, iteration), an optional seeded fuzz mode that emits hostile output
(unknown tools, malformed finals), and a schema-conforming default for
unscripted steps. HttpProvider speaks the common chat-completions wire
format. Node id and iteration ride on the request as routing metadata for
the mock; message *content* stays a pure function of system prompt, inputs,
and declared state reads.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass, replace
from typing import Protocol

from .errors import ProviderError
from .values import (
    FieldType,
    ListOf,
    Primitive,
    RecordOf,
    Schema,
    Value,
    default_record,
    to_plain,
)

DEFAULT_TEMPERATURE = 1.0
DEFAULT_MAX_TOKENS = 2000


@dataclass(frozen=True)
class ToolDef:
    name: str
    input_schema: Schema
    description: str = ""


@dataclass(frozen=True)
class ToolCallRequest:
    """A tool invocation the model asked for. ``args`` is the decoded Value
    when the arguments were well-formed JSON of inferable shape, else None
    (the raw text is kept for refusal diagnostics)."""

    name: str
    args: Value | None
    args_text: str = ""


@dataclass(frozen=True)
class ProviderRequest:
    node_id: str
    iteration: int  # 1-based loop position
    messages: tuple[tuple[str, str], ...]  # (role, content)
    tool_defs: tuple[ToolDef, ...]
    required_output_schema: Schema
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS


@dataclass(frozen=True)
class ProviderResponse:
    """Exactly one of final_text / tool_calls is set."""

    final_text: str | None = None
    tool_calls: tuple[ToolCallRequest, ...] | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if (self.final_text is None) == (self.tool_calls is None):
            raise ProviderError("response must carry final text xor tool calls")


class Provider(Protocol):
    def complete(self, request: ProviderRequest) -> ProviderResponse: ...


# --- scripted / fuzz mock ----------------------------------------------------


def final(text: str) -> ProviderResponse:
    return ProviderResponse(final_text=text)


def tool_call(name: str, args: Value | None = None) -> ProviderResponse:
    return ProviderResponse(tool_calls=(ToolCallRequest(name, args),))


def tool_calls(*calls: ToolCallRequest) -> ProviderResponse:
    return ProviderResponse(tool_calls=tuple(calls))


class MockProvider:
    """Deterministic stand-in for a model.

    script: {(node_id, iteration): ProviderResponse}. Missing entries fall
    back to a default final conforming to the required output schema, or, in
    fuzz mode, to a seeded generator that emits a mix of valid finals, valid
    tool calls, unknown-tool calls, and malformed output. Identical
    (script, seed) yields identical byte-level transcripts regardless of
    scheduling, because the RNG is derived per (seed, node, iteration).
    """

    def __init__(
        self,
        script: dict[tuple[str, int], ProviderResponse] | None = None,
        fuzz_seed: int | None = None,
    ):
        self.script = dict(script or {})
        self.fuzz_seed = fuzz_seed

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        scripted = self.script.get((request.node_id, request.iteration))
        if scripted is not None:
            return self._with_usage(scripted, request)
        if self.fuzz_seed is not None:
            return self._with_usage(self._fuzz(request), request)
        text = json.dumps(to_plain(default_record(request.required_output_schema)), sort_keys=True)
        return self._with_usage(final(text), request)

    @staticmethod
    def _with_usage(resp: ProviderResponse, request: ProviderRequest) -> ProviderResponse:
        prompt = sum(len(c) for _, c in request.messages) // 4
        completion = len(resp.final_text or "") // 4 + sum(len(c.name) for c in resp.tool_calls or ())
        return replace(resp, prompt_tokens=prompt, completion_tokens=completion)

    def _fuzz(self, request: ProviderRequest) -> ProviderResponse:
        rng = _derived_rng(self.fuzz_seed, request.node_id, request.iteration)  # type: ignore[arg-type]
        roll = rng.random()
        if roll < 0.30:
            # hallucinated tool: a name guaranteed to miss the registry
            ghost = f"ghost_{rng.randrange(1 << 30):08x}"
            return tool_call(ghost, Value.of_record({}))
        if roll < 0.45:
            return final('{"unterminated": ')
        if roll < 0.60:
            return final(json.dumps({f"wrong_{rng.randrange(1000)}": rng.randrange(100)}))
        if roll < 0.80 and request.tool_defs:
            chosen = request.tool_defs[rng.randrange(len(request.tool_defs))]
            return tool_call(chosen.name, _random_value_for(RecordOf(chosen.input_schema), rng))
        text = json.dumps(to_plain(_random_value_for(RecordOf(request.required_output_schema), rng)), sort_keys=True)
        return final(text)


def _derived_rng(seed: int, node_id: str, iteration: int) -> random.Random:
    raw = f"{seed}:{node_id}:{iteration}".encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(raw).digest()[:8], "big"))


def _random_value_for(ftype: FieldType, rng: random.Random) -> Value:
    if isinstance(ftype, Primitive):
        name = ftype.name
        if name == "bool":
            return Value.of_bool(rng.random() < 0.5)
        if name == "int":
            return Value.of_int(rng.randrange(-1_000_000, 1_000_000))
        if name == "float":
            return Value.of_float(round(rng.uniform(-1000, 1000), 6))
        if name == "string":
            return Value.of_string("".join(rng.choice("abcdefgh ") for _ in range(rng.randrange(12))))
        return Value.of_bytes(bytes(rng.randrange(256) for _ in range(rng.randrange(8))))
    if isinstance(ftype, ListOf):
        return Value.of_list(_random_value_for(ftype.elem, rng) for _ in range(rng.randrange(4)))
    if isinstance(ftype, RecordOf):
        return Value.of_record({n: _random_value_for(t, rng) for n, t in ftype.schema.fields})
    raise ProviderError(f"cannot synthesize {ftype!r}")


# --- HTTP provider --------------------------------------------------------------


def _json_schema_of(ftype: FieldType) -> dict:
    if isinstance(ftype, Primitive):
        return {
            "bool": {"type": "boolean"},
            "int": {"type": "integer"},
            "float": {"type": "number"},
            "string": {"type": "string"},
            "bytes": {"type": "string", "contentEncoding": "base64"},
        }[ftype.name]
    if isinstance(ftype, ListOf):
        return {"type": "array", "items": _json_schema_of(ftype.elem)}
    assert isinstance(ftype, RecordOf)
    return {
        "type": "object",
        "properties": {n: _json_schema_of(t) for n, t in ftype.schema.fields},
        "required": list(ftype.schema.names()),
        "additionalProperties": False,
    }


def infer_value(obj: object) -> Value | None:
    """Best-effort tagging of untyped JSON (tool-call arguments). Returns
    None when the shape is ambiguous (nulls, mixed-tag arrays)."""
    if isinstance(obj, bool):
        return Value.of_bool(obj)
    if isinstance(obj, int):
        try:
            return Value.of_int(obj)
        except Exception:
            return None
    if isinstance(obj, float):
        return Value.of_float(obj)
    if isinstance(obj, str):
        return Value.of_string(obj)
    if isinstance(obj, list):
        items = [infer_value(x) for x in obj]
        if any(i is None for i in items):
            return None
        tags = {i.tag for i in items}  # type: ignore[union-attr]
        if len(tags) > 1:
            return None
        return Value.of_list(items)  # type: ignore[arg-type]
    if isinstance(obj, dict):
        out: dict[str, Value] = {}
        for k, v in obj.items():
            if not isinstance(k, str) or not k:
                return None
            iv = infer_value(v)
            if iv is None:
                return None
            out[k] = iv
        return Value.of_record(out)
    return None


class HttpProvider:
    """Chat-completions-compatible client (OpenAI wire shape)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout_ms: int = 60_000,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_ms = timeout_ms

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        import httpx

        payload: dict = {
            "model": self.model,
            "messages": [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.tool_defs:
            payload["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": td.name,
                        "description": td.description,
                        "parameters": _json_schema_of(RecordOf(td.input_schema)),
                    },
                }
                for td in request.tool_defs
            ]
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = httpx.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_ms / 1000.0,
            )
        except httpx.HTTPError as exc:
            raise ProviderError(f"transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"provider returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            message = body["choices"][0]["message"]
            usage = body.get("usage", {})
            prompt_tokens = int(usage.get("prompt_tokens", 0))
            completion_tokens = int(usage.get("completion_tokens", 0))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed provider payload: {exc}") from exc

        raw_calls = message.get("tool_calls")
        if raw_calls:
            calls = []
            for rc in raw_calls:
                try:
                    name = rc["function"]["name"]
                    args_text = rc["function"].get("arguments", "{}")
                except (KeyError, TypeError) as exc:
                    raise ProviderError(f"malformed tool call: {exc}") from exc
                try:
                    args = infer_value(json.loads(args_text))
                except json.JSONDecodeError:
                    args = None
                calls.append(ToolCallRequest(name, args, args_text))
            return ProviderResponse(
                tool_calls=tuple(calls), prompt_tokens=prompt_tokens, completion_tokens=completion_tokens
            )
        content = message.get("content")
        if not isinstance(content, str):
            raise ProviderError("provider returned neither content nor tool calls")
        return ProviderResponse(final_text=content, prompt_tokens=prompt_tokens, completion_tokens=completion_tokens)
