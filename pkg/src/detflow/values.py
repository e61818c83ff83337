"""Typed values and schemas with a byte-stable canonical serialization.

The canonical encoding is self-describing tagged JSON rendered with sorted
keys, compact separators, and UTF-8. Two properties the rest of the engine
relies on:

- equal values produce identical canonical bytes (hashing, caching, trace
  digests, cross-process transport all key off these bytes);
- int payloads are decimal strings and float payloads use a fixed shortest
  round-trip decimal format, so a JavaScript host can reproduce the bytes
  exactly (JSON numbers would silently lose 64-bit ints there).

Alongside the canonical codec there is a schema-directed "plain" codec for
human-facing JSON (model outputs, initial-state files): plain JSON values
with no type tags, decoded strictly against a Schema.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

from .errors import CanonicalDecodeError, PlainDecodeError, ValueError_

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

PRIMITIVE_NAMES = ("bool", "int", "float", "string", "bytes")


# --- type model -----------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str

    def __post_init__(self):
        if self.name not in PRIMITIVE_NAMES:
            raise ValueError_(f"unknown primitive type {self.name!r}")

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True)
class ListOf:
    elem: Primitive

    def __post_init__(self):
        if not isinstance(self.elem, Primitive):
            raise ValueError_(f"list element type must be primitive, got {self.elem!r}")

    def __repr__(self) -> str:
        return f"list<{self.elem!r}>"


@dataclass(frozen=True)
class RecordOf:
    schema: "Schema"

    def __repr__(self) -> str:
        return f"record<{self.schema!r}>"


FieldType = Union[Primitive, ListOf, RecordOf]

BOOL = Primitive("bool")
INT = Primitive("int")
FLOAT = Primitive("float")
STRING = Primitive("string")
BYTES = Primitive("bytes")


class Schema:
    """An ordered set of uniquely named, typed fields.

    Field order is not semantic: fields are normalized to name order at
    construction, so structurally equal schemas compare and hash equal no
    matter how they were written down.
    """

    __slots__ = ("fields",)

    def __init__(self, fields: Mapping[str, FieldType] | Iterable[tuple[str, FieldType]] = ()):
        items = list(fields.items()) if isinstance(fields, Mapping) else list(fields)
        seen: set[str] = set()
        for name, ftype in items:
            if not name or not isinstance(name, str):
                raise ValueError_(f"field names must be non-empty strings, got {name!r}")
            if name in seen:
                raise ValueError_(f"duplicate field name {name!r}")
            if not isinstance(ftype, (Primitive, ListOf, RecordOf)):
                raise ValueError_(f"field {name!r} has invalid type {ftype!r}")
            seen.add(name)
        object.__setattr__(self, "fields", tuple(sorted(items)))

    def __setattr__(self, *_):
        raise AttributeError("Schema is immutable")

    def __eq__(self, other) -> bool:
        return isinstance(other, Schema) and self.fields == other.fields

    def __hash__(self) -> int:
        return hash(self.fields)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}: {t!r}" for n, t in self.fields)
        return "{" + inner + "}"

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.fields)

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)

    def get(self, name: str) -> FieldType | None:
        for n, t in self.fields:
            if n == name:
                return t
        return None

    def as_dict(self) -> dict[str, FieldType]:
        return dict(self.fields)

    def subset(self, names: Iterable[str]) -> "Schema":
        wanted = set(names)
        return Schema([(n, t) for n, t in self.fields if n in wanted])

    def merged(self, other: "Schema") -> "Schema":
        """Union of two schemas; shared names must agree on type."""
        out = self.as_dict()
        for name, ftype in other.fields:
            if name in out and out[name] != ftype:
                raise ValueError_(f"conflicting types for field {name!r}")
            out[name] = ftype
        return Schema(out)

    def canonical_digest(self) -> str:
        raw = json.dumps(schema_descriptor(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()


EMPTY_SCHEMA = Schema()


# --- value model ------------------------------------------------------------


@dataclass(frozen=True)
class Value:
    """A tagged datum. Construct via the classmethods, which normalize and
    range-check payloads (64-bit ints, record key order)."""

    tag: str
    payload: object

    @classmethod
    def of_bool(cls, b: bool) -> "Value":
        if not isinstance(b, bool):
            raise ValueError_(f"expected bool, got {type(b).__name__}")
        return cls("bool", b)

    @classmethod
    def of_int(cls, i: int) -> "Value":
        if isinstance(i, bool) or not isinstance(i, int):
            raise ValueError_(f"expected int, got {type(i).__name__}")
        if not (INT64_MIN <= i <= INT64_MAX):
            raise ValueError_(f"int out of 64-bit range: {i}")
        return cls("int", i)

    @classmethod
    def of_float(cls, f: float) -> "Value":
        if isinstance(f, bool) or not isinstance(f, (int, float)):
            raise ValueError_(f"expected float, got {type(f).__name__}")
        return cls("float", float(f))

    @classmethod
    def of_string(cls, s: str) -> "Value":
        if not isinstance(s, str):
            raise ValueError_(f"expected str, got {type(s).__name__}")
        return cls("string", s)

    @classmethod
    def of_bytes(cls, b: bytes) -> "Value":
        if not isinstance(b, (bytes, bytearray)):
            raise ValueError_(f"expected bytes, got {type(b).__name__}")
        return cls("bytes", bytes(b))

    @classmethod
    def of_list(cls, items: Iterable["Value"]) -> "Value":
        tup = tuple(items)
        for it in tup:
            if not isinstance(it, Value):
                raise ValueError_(f"list items must be Values, got {type(it).__name__}")
        return cls("list", tup)

    @classmethod
    def of_record(cls, fields: Mapping[str, "Value"]) -> "Value":
        for k, v in fields.items():
            if not isinstance(k, str) or not k:
                raise ValueError_(f"record keys must be non-empty strings, got {k!r}")
            if not isinstance(v, Value):
                raise ValueError_(f"record values must be Values, got {type(v).__name__}")
        return cls("record", tuple(sorted(fields.items())))

    # -- accessors --

    @property
    def record(self) -> dict[str, "Value"]:
        if self.tag != "record":
            raise ValueError_(f"not a record: {self.tag}")
        return dict(self.payload)  # type: ignore[arg-type]

    def field(self, name: str) -> "Value":
        if self.tag != "record":
            raise ValueError_(f"not a record: {self.tag}")
        for k, v in self.payload:  # type: ignore[union-attr]
            if k == name:
                return v
        raise KeyError(name)

    def has_field(self, name: str) -> bool:
        return self.tag == "record" and any(k == name for k, _ in self.payload)  # type: ignore[union-attr]

    def __repr__(self) -> str:
        return f"Value({self.tag}={self.payload!r})"


EMPTY_RECORD = Value.of_record({})


def record_of(**fields: Value) -> Value:
    return Value.of_record(fields)


# --- conformance -----------------------------------------------------------


def conform_error(value: Value, ftype: FieldType, path: str = "") -> str | None:
    """Return a human-readable mismatch description, or None if the value
    conforms to the type. Total: never raises on well-formed inputs."""
    where = path or "<root>"
    if isinstance(ftype, Primitive):
        if value.tag != ftype.name:
            return f"{where}: expected {ftype.name}, got {value.tag}"
        return None
    if isinstance(ftype, ListOf):
        if value.tag != "list":
            return f"{where}: expected list, got {value.tag}"
        for i, item in enumerate(value.payload):  # type: ignore[arg-type]
            err = conform_error(item, ftype.elem, f"{where}[{i}]")
            if err:
                return err
        return None
    if isinstance(ftype, RecordOf):
        if value.tag != "record":
            return f"{where}: expected record, got {value.tag}"
        return record_conform_error(value, ftype.schema, path)
    return f"{where}: unknown field type {ftype!r}"


def record_conform_error(value: Value, schema: Schema, path: str = "") -> str | None:
    """Exact-field record check: extraneous and missing fields both fail."""
    where = path or "<root>"
    if value.tag != "record":
        return f"{where}: expected record, got {value.tag}"
    present = {k for k, _ in value.payload}  # type: ignore[union-attr]
    declared = set(schema.names())
    missing = declared - present
    extra = present - declared
    if missing:
        return f"{where}: missing fields: {', '.join(sorted(missing))}"
    if extra:
        return f"{where}: unexpected fields: {', '.join(sorted(extra))}"
    for name, ftype in schema.fields:
        err = conform_error(value.field(name), ftype, f"{where}.{name}" if path else name)
        if err:
            return err
    return None


def conforms(value: Value, ftype: FieldType) -> bool:
    return conform_error(value, ftype) is None


def record_conforms(value: Value, schema: Schema) -> bool:
    return record_conform_error(value, schema) is None


# --- canonical float formatting --------------------------------------------


def format_float(x: float) -> str:
    """Fixed shortest round-trip decimal rendering (repr-compatible),
    with named non-finite forms."""
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return repr(x)


def parse_float(s: str) -> float:
    if s == "NaN":
        return math.nan
    if s == "Infinity":
        return math.inf
    if s == "-Infinity":
        return -math.inf
    return float(s)


# --- canonical (tagged) codec -----------------------------------------------


def canonical_obj(value: Value) -> dict:
    t = value.tag
    if t == "bool":
        return {"t": "bool", "v": value.payload}
    if t == "int":
        return {"t": "int", "v": str(value.payload)}
    if t == "float":
        return {"t": "float", "v": format_float(value.payload)}  # type: ignore[arg-type]
    if t == "string":
        return {"t": "string", "v": value.payload}
    if t == "bytes":
        return {"t": "bytes", "v": base64.b64encode(value.payload).decode("ascii")}  # type: ignore[arg-type]
    if t == "list":
        return {"t": "list", "v": [canonical_obj(it) for it in value.payload]}  # type: ignore[union-attr]
    if t == "record":
        return {"t": "record", "v": {k: canonical_obj(v) for k, v in value.payload}}  # type: ignore[union-attr]
    raise ValueError_(f"unknown tag {t!r}")


def canonical_json_bytes(obj: object) -> bytes:
    """Canonical rendering for any jsonable object (sorted keys, compact,
    UTF-8). Shared by every digest in the system."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def canonical_bytes(value: Value) -> bytes:
    return canonical_json_bytes(canonical_obj(value))


def canonical_digest(value: Value) -> str:
    return hashlib.sha256(canonical_bytes(value)).hexdigest()


def digest_of(obj: object) -> str:
    return hashlib.sha256(canonical_json_bytes(obj)).hexdigest()


def value_from_canonical_obj(obj: object) -> Value:
    if not isinstance(obj, dict) or set(obj) != {"t", "v"}:
        raise CanonicalDecodeError(f"expected tagged object, got {obj!r}")
    t, v = obj["t"], obj["v"]
    try:
        if t == "bool":
            if not isinstance(v, bool):
                raise CanonicalDecodeError(f"bool payload must be true/false, got {v!r}")
            return Value.of_bool(v)
        if t == "int":
            if not isinstance(v, str):
                raise CanonicalDecodeError(f"int payload must be a decimal string, got {v!r}")
            return Value.of_int(int(v))
        if t == "float":
            if not isinstance(v, str):
                raise CanonicalDecodeError(f"float payload must be a string, got {v!r}")
            return Value.of_float(parse_float(v))
        if t == "string":
            if not isinstance(v, str):
                raise CanonicalDecodeError(f"string payload must be a string, got {v!r}")
            return Value.of_string(v)
        if t == "bytes":
            if not isinstance(v, str):
                raise CanonicalDecodeError(f"bytes payload must be base64, got {v!r}")
            return Value.of_bytes(base64.b64decode(v.encode("ascii"), validate=True))
        if t == "list":
            if not isinstance(v, list):
                raise CanonicalDecodeError(f"list payload must be an array, got {v!r}")
            return Value.of_list(value_from_canonical_obj(it) for it in v)
        if t == "record":
            if not isinstance(v, dict):
                raise CanonicalDecodeError(f"record payload must be an object, got {v!r}")
            return Value.of_record({k: value_from_canonical_obj(x) for k, x in v.items()})
    except (ValueError, ValueError_) as exc:
        raise CanonicalDecodeError(str(exc)) from exc
    raise CanonicalDecodeError(f"unknown tag {t!r}")


def value_from_canonical_bytes(raw: bytes) -> Value:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CanonicalDecodeError(str(exc)) from exc
    return value_from_canonical_obj(obj)


# --- plain (schema-directed) codec ------------------------------------------


def to_plain(value: Value, ftype: FieldType | None = None) -> object:
    """Render a value as plain JSON-able data. Bytes become base64 strings,
    non-finite floats become their names (schema context disambiguates)."""
    t = value.tag
    if t == "bool" or t == "int" or t == "string":
        return value.payload
    if t == "float":
        f = value.payload
        return f if math.isfinite(f) else format_float(f)  # type: ignore[arg-type]
    if t == "bytes":
        return base64.b64encode(value.payload).decode("ascii")  # type: ignore[arg-type]
    if t == "list":
        return [to_plain(it) for it in value.payload]  # type: ignore[union-attr]
    if t == "record":
        return {k: to_plain(v) for k, v in value.payload}  # type: ignore[union-attr]
    raise ValueError_(f"unknown tag {t!r}")


def record_to_plain(value: Value, schema: Schema | None = None) -> dict:
    out = to_plain(value)
    if not isinstance(out, dict):
        raise ValueError_("not a record")
    return out


def from_plain(obj: object, ftype: FieldType, path: str = "") -> Value:
    """Strict schema-directed decode. No coercions: an int is not a string,
    a bool is not an int, numbers outside 64-bit range are rejected."""
    where = path or "<root>"
    if isinstance(ftype, Primitive):
        name = ftype.name
        if name == "bool":
            if not isinstance(obj, bool):
                raise PlainDecodeError(where, f"expected bool, got {_plain_kind(obj)}")
            return Value.of_bool(obj)
        if name == "int":
            if isinstance(obj, bool) or not isinstance(obj, int):
                raise PlainDecodeError(where, f"expected int, got {_plain_kind(obj)}")
            if not (INT64_MIN <= obj <= INT64_MAX):
                raise PlainDecodeError(where, f"int out of 64-bit range: {obj}")
            return Value.of_int(obj)
        if name == "float":
            if isinstance(obj, bool):
                raise PlainDecodeError(where, "expected float, got bool")
            if isinstance(obj, (int, float)):
                return Value.of_float(float(obj))
            if obj in ("NaN", "Infinity", "-Infinity"):
                return Value.of_float(parse_float(obj))
            raise PlainDecodeError(where, f"expected float, got {_plain_kind(obj)}")
        if name == "string":
            if not isinstance(obj, str):
                raise PlainDecodeError(where, f"expected string, got {_plain_kind(obj)}")
            return Value.of_string(obj)
        if name == "bytes":
            if not isinstance(obj, str):
                raise PlainDecodeError(where, f"expected base64 string, got {_plain_kind(obj)}")
            try:
                return Value.of_bytes(base64.b64decode(obj.encode("ascii"), validate=True))
            except Exception as exc:
                raise PlainDecodeError(where, f"invalid base64: {exc}") from exc
    if isinstance(ftype, ListOf):
        if not isinstance(obj, list):
            raise PlainDecodeError(where, f"expected array, got {_plain_kind(obj)}")
        return Value.of_list(from_plain(it, ftype.elem, f"{where}[{i}]") for i, it in enumerate(obj))
    if isinstance(ftype, RecordOf):
        return record_from_plain(obj, ftype.schema, path)
    raise PlainDecodeError(where, f"unknown field type {ftype!r}")


def record_from_plain(obj: object, schema: Schema, path: str = "") -> Value:
    where = path or "<root>"
    if not isinstance(obj, dict):
        raise PlainDecodeError(where, f"expected object, got {_plain_kind(obj)}")
    declared = set(schema.names())
    extra = set(obj) - declared
    missing = declared - set(obj)
    if extra:
        raise PlainDecodeError(where, f"unexpected fields: {', '.join(sorted(extra))}")
    if missing:
        raise PlainDecodeError(where, f"missing fields: {', '.join(sorted(missing))}")
    return Value.of_record(
        {name: from_plain(obj[name], ftype, f"{where}.{name}" if path else name) for name, ftype in schema.fields}
    )


def _plain_kind(obj: object) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "bool"
    if isinstance(obj, int):
        return "int"
    if isinstance(obj, float):
        return "float"
    if isinstance(obj, str):
        return "string"
    if isinstance(obj, list):
        return "array"
    if isinstance(obj, dict):
        return "object"
    return type(obj).__name__


# --- schema descriptors -------------------------------------------------


def type_descriptor(ftype: FieldType) -> object:
    if isinstance(ftype, Primitive):
        return ftype.name
    if isinstance(ftype, ListOf):
        return {"list": type_descriptor(ftype.elem)}
    if isinstance(ftype, RecordOf):
        return {"record": schema_descriptor(ftype.schema)}
    raise ValueError_(f"unknown field type {ftype!r}")


def schema_descriptor(schema: Schema) -> dict:
    return {name: type_descriptor(ftype) for name, ftype in schema.fields}


def type_from_descriptor(obj: object, path: str = "") -> FieldType:
    where = path or "<root>"
    if isinstance(obj, str):
        if obj in PRIMITIVE_NAMES:
            return Primitive(obj)
        raise ParseTypeError(f"{where}: unknown type name {obj!r}")
    if isinstance(obj, dict) and len(obj) == 1:
        if "list" in obj:
            return ListOf(type_from_descriptor(obj["list"], where + ".list"))
        if "record" in obj:
            return RecordOf(schema_from_descriptor(obj["record"], where + ".record"))
    raise ParseTypeError(f"{where}: malformed type descriptor {obj!r}")


def schema_from_descriptor(obj: object, path: str = "") -> Schema:
    where = path or "<root>"
    if not isinstance(obj, dict):
        raise ParseTypeError(f"{where}: schema descriptor must be an object, got {obj!r}")
    try:
        return Schema({name: type_from_descriptor(t, f"{where}.{name}") for name, t in obj.items()})
    except ValueError_ as exc:
        raise ParseTypeError(f"{where}: {exc}") from exc


class ParseTypeError(CanonicalDecodeError):
    pass


def type_of_value(value: Value) -> FieldType:
    """Reconstruct a value's type. Empty lists are untypeable without a
    declared schema, so they raise rather than guess."""
    tag = value.tag
    if tag in ("bool", "int", "float", "string", "bytes"):
        return Primitive(tag)
    if tag == "list":
        items = value.payload
        if not items:
            raise ValueError_("cannot infer an element type for an empty list; declare a schema")
        elem = type_of_value(items[0])  # type: ignore[index]
        if not isinstance(elem, Primitive):
            raise ValueError_("list elements must be primitive")
        for item in items[1:]:  # type: ignore[union-attr]
            if type_of_value(item) != elem:
                raise ValueError_("list elements have mixed types")
        return ListOf(elem)
    if tag == "record":
        return RecordOf(Schema({name: type_of_value(v) for name, v in value.payload}))  # type: ignore[union-attr]
    raise ValueError_(f"unknown tag {tag!r}")


# --- deterministic synthesis -------------------------------------------------


def default_value(ftype: FieldType) -> Value:
    """The zero value for a type; used to synthesize schema-conforming
    structured output deterministically."""
    if isinstance(ftype, Primitive):
        return {
            "bool": Value.of_bool(False),
            "int": Value.of_int(0),
            "float": Value.of_float(0.0),
            "string": Value.of_string(""),
            "bytes": Value.of_bytes(b""),
        }[ftype.name]
    if isinstance(ftype, ListOf):
        return Value.of_list(())
    if isinstance(ftype, RecordOf):
        return default_record(ftype.schema)
    raise ValueError_(f"unknown field type {ftype!r}")


def default_record(schema: Schema) -> Value:
    return Value.of_record({name: default_value(ftype) for name, ftype in schema.fields})
