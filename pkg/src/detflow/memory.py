"""Three isolated memory tiers.

ScratchSpace: private to one (node, attempt); dies with it.
StateStore:   the shared workflow context; atomic multi-key commits under a
              single logical clock, gapless per-key versions, and an
              append-only provenance history that folds back to the current
              state.
ConnectorHub: external-resource access (files, HTTP) with pooling, retries,
              and response caching keyed by canonical request bytes.
              Responses are returned to the caller only; nothing is ever
              auto-injected into an agent context.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .errors import (
    ConnectorError,
    MissingKey,
    PoolTimeout,
    SchemaViolation,
    ScopeViolation,
    ScratchClosed,
    UnknownConnector,
)
from .recovery import FailFast, RecoveryPolicy, Retry, retry_delay_ms
from .values import BYTES, INT, STRING, FieldType, Schema, Value, canonical_bytes, conform_error

# --- scratch ------------------------------------------------------------------


class ScratchSpace:
    """Ephemeral per-attempt key-value pad. Closing is terminal."""

    def __init__(self, owner: tuple[str, int]):
        self.owner = owner
        self._data: dict[str, Value] = {}
        self._closed = False

    def _check(self) -> None:
        if self._closed:
            raise ScratchClosed(f"scratch for {self.owner} is closed")

    def put(self, key: str, value: Value) -> None:
        self._check()
        self._data[key] = value

    def get(self, key: str) -> Value:
        self._check()
        return self._data[key]  # KeyError on absent keys, like a dict

    def keys(self) -> tuple[str, ...]:
        self._check()
        return tuple(self._data)

    def close(self) -> None:
        self._closed = True
        self._data.clear()

    @property
    def closed(self) -> bool:
        return self._closed


# --- state store ----------------------------------------------------------------


@dataclass(frozen=True)
class StateEntry:
    key: str
    version: int  # per-key, gapless from 1
    value: Value
    writer: str  # node id (or "_initial")
    logical_time: int  # one tick per commit, shared by batched entries


@dataclass(frozen=True)
class StateSnapshot:
    """A frozen, scope-limited view of the store at one logical time."""

    logical_time: int
    scope: frozenset[str]
    _values: tuple[tuple[str, Value], ...]

    def read(self, key: str) -> Value:
        if key not in self.scope:
            raise ScopeViolation(key)
        for k, v in self._values:
            if k == key:
                return v
        raise MissingKey(key)

    def value(self, key: str) -> Value:
        """Unchecked presence accessor for callers that probed keys() first."""
        for k, v in self._values:
            if k == key:
                return v
        raise MissingKey(key)

    def keys(self) -> frozenset[str]:
        return frozenset(k for k, _ in self._values)

    def as_dict(self) -> dict[str, Value]:
        return dict(self._values)


class StateStore:
    """Versioned shared state with atomic multi-key commits.

    The schema starts as the declared entry-state schema and may only grow:
    a commit introducing an unknown key must carry that key in ``declared``
    (the engine passes each node's declared output record). Either every
    update in a commit lands or none do.
    """

    def __init__(self, schema: Schema | None = None):
        self._schema: dict[str, FieldType] = dict((schema or Schema()).fields)
        self._current: dict[str, Value] = {}
        self._versions: dict[str, int] = {}
        self._history: list[StateEntry] = []
        self._logical_time = 0
        self._lock = threading.RLock()

    @property
    def logical_time(self) -> int:
        with self._lock:
            return self._logical_time

    @property
    def schema(self) -> Schema:
        with self._lock:
            return Schema(dict(self._schema))

    def commit(self, updates: Mapping[str, Value], writer: str, declared: Schema | None = None) -> int:
        """Apply all updates atomically; returns the commit's logical time."""
        if not updates:
            raise SchemaViolation("empty commit")
        with self._lock:
            # validate everything before touching state: all-or-nothing
            new_schema: dict[str, FieldType] = {}
            for key, value in updates.items():
                if not key or not isinstance(key, str):
                    raise SchemaViolation(f"state keys must be non-empty strings, got {key!r}")
                ftype = self._schema.get(key)
                if ftype is None:
                    ftype = declared.get(key) if declared is not None else None
                    if ftype is None:
                        raise SchemaViolation(f"key {key!r} is not in the state schema and not declared by the writer")
                    new_schema[key] = ftype
                err = conform_error(value, ftype, key)
                if err:
                    raise SchemaViolation(err)
            self._schema.update(new_schema)
            self._logical_time += 1
            t = self._logical_time
            for key in sorted(updates):
                version = self._versions.get(key, 0) + 1
                self._versions[key] = version
                self._current[key] = updates[key]
                self._history.append(StateEntry(key, version, updates[key], writer, t))
            return t

    def snapshot(self, scope: Iterable[str] | None = None) -> StateSnapshot:
        with self._lock:
            sc = frozenset(scope) if scope is not None else frozenset(self._current)
            vals = tuple(sorted((k, v) for k, v in self._current.items() if k in sc))
            return StateSnapshot(self._logical_time, sc, vals)

    def snapshot_asof(self, scope: Iterable[str], logical_time: int) -> StateSnapshot:
        """The store as it stood at ``logical_time``, restricted to scope.
        Lets a resumed run reconstruct exactly the view an interrupted run
        captured earlier."""
        with self._lock:
            sc = frozenset(scope)
            vals: dict[str, Value] = {}
            for entry in self._history:  # appended in logical-time order
                if entry.logical_time > logical_time:
                    break
                if entry.key in sc:
                    vals[entry.key] = entry.value
            return StateSnapshot(logical_time, sc, tuple(sorted(vals.items())))

    def provenance(self, key: str) -> tuple[StateEntry, ...]:
        with self._lock:
            return tuple(e for e in self._history if e.key == key)

    @property
    def history(self) -> tuple[StateEntry, ...]:
        with self._lock:
            return tuple(self._history)

    def current(self) -> dict[str, Value]:
        with self._lock:
            return dict(self._current)

    def versions(self) -> dict[str, int]:
        with self._lock:
            return dict(self._versions)

    @classmethod
    def fold(cls, schema: Schema, history: Iterable[StateEntry]) -> "StateStore":
        """Rebuild a store by replaying history in order; used by checkpoint
        load and as the provenance integrity check."""
        store = cls(schema)
        pending: list[StateEntry] = []
        for entry in history:
            if pending and entry.logical_time != pending[0].logical_time:
                store._apply_folded(pending)
                pending = []
            pending.append(entry)
        if pending:
            store._apply_folded(pending)
        return store

    def _apply_folded(self, batch: list[StateEntry]) -> None:
        with self._lock:
            self._logical_time = batch[0].logical_time
            for entry in batch:
                expected = self._versions.get(entry.key, 0) + 1
                if entry.version != expected:
                    raise SchemaViolation(
                        f"history corrupt: key {entry.key!r} version {entry.version}, expected {expected}"
                    )
                self._versions[entry.key] = entry.version
                self._current[entry.key] = entry.value
                self._schema.setdefault(entry.key, _widest_type(entry.value))
                self._history.append(entry)


def _widest_type(value: Value) -> FieldType:
    # fold() may see keys beyond the base schema (node outputs); infer shape
    from .values import BOOL, BYTES, FLOAT, INT, STRING, ListOf, RecordOf

    tag = value.tag
    if tag == "bool":
        return BOOL
    if tag == "int":
        return INT
    if tag == "float":
        return FLOAT
    if tag == "string":
        return STRING
    if tag == "bytes":
        return BYTES
    if tag == "list":
        items = value.payload
        elem = _widest_type(items[0]) if items else STRING  # type: ignore[index]
        return ListOf(elem)
    return RecordOf(Schema({k: _widest_type(v) for k, v in value.payload}))  # type: ignore[union-attr]


# --- connector hub -------------------------------------------------------------------


@dataclass(frozen=True)
class CacheConfig:
    enabled: bool = False
    max_entries: int = 128
    ttl_ms: int | None = None  # None: entries never expire within a run


@dataclass(frozen=True)
class ConnectorSpec:
    id: str
    kind: str  # "file" | "http" | anything registered
    pool_size: int = 1
    retry: RecoveryPolicy = FailFast()
    cache: CacheConfig = CacheConfig()
    pool_timeout_ms: int = 30_000


Backend = Callable[[Value], Value]


class _Connector:
    def __init__(self, spec: ConnectorSpec, backend: Backend):
        self.spec = spec
        self.backend = backend
        self.pool = threading.BoundedSemaphore(spec.pool_size)
        self.cache: dict[bytes, tuple[Value, float | None]] = {}
        self.cache_lock = threading.Lock()
        self.calls = 0  # backend invocations, observable for cache tests


class ConnectorHub:
    """Registry and funnel for external-resource connectors."""

    def __init__(self):
        self._connectors: dict[str, _Connector] = {}

    def register(self, spec: ConnectorSpec, backend: Backend) -> None:
        if spec.id in self._connectors:
            raise ConnectorError(f"connector {spec.id!r} already registered")
        self._connectors[spec.id] = _Connector(spec, backend)

    def has(self, connector_id: str) -> bool:
        return connector_id in self._connectors

    def backend_calls(self, connector_id: str) -> int:
        return self._get(connector_id).calls

    def _get(self, connector_id: str) -> _Connector:
        c = self._connectors.get(connector_id)
        if c is None:
            raise UnknownConnector(f"no connector {connector_id!r}")
        return c

    def call(self, connector_id: str, request: Value) -> Value:
        """Lease a pool slot, consult the cache, and invoke the backend with
        the connector's retry policy."""
        c = self._get(connector_id)
        key = canonical_bytes(request) if c.spec.cache.enabled else b""

        if c.spec.cache.enabled:
            hit = self._cache_get(c, key)
            if hit is not None:
                return hit

        if not c.pool.acquire(timeout=c.spec.pool_timeout_ms / 1000.0):
            raise PoolTimeout(f"connector {connector_id!r}: no free handle within {c.spec.pool_timeout_ms} ms")
        try:
            result = self._call_with_retry(c, request)
        finally:
            c.pool.release()

        if c.spec.cache.enabled:
            self._cache_put(c, key, result)
        return result

    def _call_with_retry(self, c: _Connector, request: Value) -> Value:
        policy = c.spec.retry
        attempt = 0
        while True:
            try:
                c.calls += 1
                return c.backend(request)
            except Exception as exc:
                if isinstance(policy, Retry) and attempt + 1 < policy.max_attempts:
                    time.sleep(retry_delay_ms(policy, attempt) / 1000.0)
                    attempt += 1
                    continue
                raise ConnectorError(f"connector {c.spec.id!r} failed after {attempt + 1} attempt(s): {exc}") from exc

    def _cache_get(self, c: _Connector, key: bytes) -> Value | None:
        with c.cache_lock:
            hit = c.cache.get(key)
            if hit is None:
                return None
            value, expiry = hit
            if expiry is not None and time.monotonic() > expiry:
                del c.cache[key]
                return None
            # refresh LRU position
            del c.cache[key]
            c.cache[key] = (value, expiry)
            return value

    def _cache_put(self, c: _Connector, key: bytes, value: Value) -> None:
        ttl = c.spec.cache.ttl_ms
        expiry = time.monotonic() + ttl / 1000.0 if ttl is not None else None
        with c.cache_lock:
            c.cache[key] = (value, expiry)
            while len(c.cache) > c.spec.cache.max_entries:
                c.cache.pop(next(iter(c.cache)))


# --- built-in backends ------------------------------------------------------------


def file_backend(base_dir: str = ".") -> Backend:
    """Request {path: string} -> {content: bytes}."""
    import os

    def backend(request: Value) -> Value:
        path = request.field("path").payload
        full = path if os.path.isabs(path) else os.path.join(base_dir, path)  # type: ignore[arg-type]
        with open(full, "rb") as fh:
            return Value.of_record({"content": Value.of_bytes(fh.read())})

    return backend


def http_backend(timeout_ms: int = 30_000) -> Backend:
    """Request {method, url, headers (JSON object string), body: bytes} ->
    {status: int, body: bytes}."""
    import json

    import httpx

    def backend(request: Value) -> Value:
        rec = request.record
        headers = json.loads(rec["headers"].payload) if rec["headers"].payload else {}  # type: ignore[arg-type]
        resp = httpx.request(
            rec["method"].payload,  # type: ignore[arg-type]
            rec["url"].payload,  # type: ignore[arg-type]
            headers=headers,
            content=rec["body"].payload or None,  # type: ignore[arg-type]
            timeout=timeout_ms / 1000.0,
        )
        return Value.of_record({"status": Value.of_int(resp.status_code), "body": Value.of_bytes(resp.content)})

    return backend


FILE_REQUEST_SCHEMA = Schema({"path": STRING})
FILE_RESPONSE_SCHEMA = Schema({"content": BYTES})
HTTP_REQUEST_SCHEMA = Schema({"method": STRING, "url": STRING, "headers": STRING, "body": BYTES})
HTTP_RESPONSE_SCHEMA = Schema({"status": INT, "body": BYTES})


def default_hub(base_dir: str = ".", http_timeout_ms: int = 30_000) -> ConnectorHub:
    """Hub with the two built-in connectors registered under their kind names."""
    hub = ConnectorHub()
    hub.register(ConnectorSpec(id="file", kind="file", pool_size=4), file_backend(base_dir))
    hub.register(ConnectorSpec(id="http", kind="http", pool_size=4), http_backend(http_timeout_ms))
    return hub
