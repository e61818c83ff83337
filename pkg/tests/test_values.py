import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detflow.errors import CanonicalDecodeError, PlainDecodeError, ValueError_
from detflow.values import (
    BOOL,
    BYTES,
    FLOAT,
    INT,
    INT64_MAX,
    INT64_MIN,
    STRING,
    ListOf,
    RecordOf,
    Schema,
    Value,
    canonical_bytes,
    canonical_digest,
    canonical_obj,
    conform_error,
    default_record,
    format_float,
    from_plain,
    parse_float,
    record_conform_error,
    record_from_plain,
    schema_descriptor,
    schema_from_descriptor,
    to_plain,
    type_descriptor,
    type_from_descriptor,
    type_of_value,
    value_from_canonical_bytes,
    value_from_canonical_obj,
)

# --- frozen canonical encodings -------------------------------------------------
# These bytes are the contract other implementations encode against; any
# change here is a wire break, not a refactor.

FROZEN = [
    (Value.of_bool(True), b'{"t":"bool","v":true}'),
    (Value.of_bool(False), b'{"t":"bool","v":false}'),
    (Value.of_int(0), b'{"t":"int","v":"0"}'),
    (Value.of_int(-42), b'{"t":"int","v":"-42"}'),
    (Value.of_int(INT64_MAX), b'{"t":"int","v":"9223372036854775807"}'),
    (Value.of_int(INT64_MIN), b'{"t":"int","v":"-9223372036854775808"}'),
    (Value.of_float(1.5), b'{"t":"float","v":"1.5"}'),
    (Value.of_float(0.1), b'{"t":"float","v":"0.1"}'),
    (Value.of_float(-0.0), b'{"t":"float","v":"-0.0"}'),
    (Value.of_float(1e300), b'{"t":"float","v":"1e+300"}'),
    (Value.of_float(5e-324), b'{"t":"float","v":"5e-324"}'),
    (Value.of_float(math.inf), b'{"t":"float","v":"Infinity"}'),
    (Value.of_float(-math.inf), b'{"t":"float","v":"-Infinity"}'),
    (Value.of_string(""), b'{"t":"string","v":""}'),
    (Value.of_string("héllo"), '{"t":"string","v":"héllo"}'.encode("utf-8")),
    (Value.of_bytes(b""), b'{"t":"bytes","v":""}'),
    (Value.of_bytes(b"\x00\xff"), b'{"t":"bytes","v":"AP8="}'),
    (Value.of_list([Value.of_int(1), Value.of_int(2)]), b'{"t":"list","v":[{"t":"int","v":"1"},{"t":"int","v":"2"}]}'),
    (Value.of_record({}), b'{"t":"record","v":{}}'),
    (
        Value.of_record({"b": Value.of_bool(True), "a": Value.of_int(7)}),
        b'{"t":"record","v":{"a":{"t":"int","v":"7"},"b":{"t":"bool","v":true}}}',
    ),
]


@pytest.mark.parametrize("value,expected", FROZEN, ids=range(len(FROZEN)))
def test_frozen_canonical_bytes(value, expected):
    assert canonical_bytes(value) == expected
    assert value_from_canonical_bytes(expected) == value


def test_nan_canonical_form():
    assert canonical_bytes(Value.of_float(math.nan)) == b'{"t":"float","v":"NaN"}'
    back = value_from_canonical_bytes(b'{"t":"float","v":"NaN"}')
    assert math.isnan(back.payload)


def test_record_key_order_is_insertion_independent():
    a = Value.of_record({"x": Value.of_int(1), "y": Value.of_int(2)})
    b = Value.of_record({"y": Value.of_int(2), "x": Value.of_int(1)})
    assert a == b
    assert canonical_bytes(a) == canonical_bytes(b)
    assert canonical_digest(a) == canonical_digest(b)


def test_canonical_digest_is_sha256_of_bytes():
    import hashlib

    v = Value.of_string("check")
    assert canonical_digest(v) == hashlib.sha256(canonical_bytes(v)).hexdigest()


# --- constructors ---------------------------------------------------------------


def test_int64_range_enforced():
    Value.of_int(INT64_MAX)
    Value.of_int(INT64_MIN)
    with pytest.raises(ValueError_):
        Value.of_int(INT64_MAX + 1)
    with pytest.raises(ValueError_):
        Value.of_int(INT64_MIN - 1)


def test_bool_is_not_int():
    with pytest.raises(ValueError_):
        Value.of_int(True)
    assert Value.of_bool(True).tag == "bool"


def test_record_field_access():
    r = Value.of_record({"n": Value.of_int(3)})
    assert r.field("n").payload == 3
    assert r.has_field("n") and not r.has_field("m")
    with pytest.raises(KeyError):
        r.field("m")


# --- float formatting ------------------------------------------------------------


@pytest.mark.parametrize(
    "x,s",
    [
        (0.0, "0.0"),
        (-0.0, "-0.0"),
        (1.0, "1.0"),
        (0.1, "0.1"),
        (1 / 3, "0.3333333333333333"),
        (1e16, "1e+16"),
        (1234567890123456.0, "1234567890123456.0"),
        (1e-5, "1e-05"),
        (math.inf, "Infinity"),
        (-math.inf, "-Infinity"),
    ],
)
def test_format_float_fixed_points(x, s):
    assert format_float(x) == s


@given(st.floats(allow_nan=False))
def test_format_parse_float_roundtrip(x):
    assert parse_float(format_float(x)) == x


def test_parse_float_nan():
    assert math.isnan(parse_float("NaN"))


# --- hypothesis round-trips --------------------------------------------------------

prims = st.one_of(
    st.booleans().map(Value.of_bool),
    st.integers(INT64_MIN, INT64_MAX).map(Value.of_int),
    st.floats(allow_nan=False).map(Value.of_float),
    st.text(max_size=20).map(Value.of_string),
    st.binary(max_size=20).map(Value.of_bytes),
)

values = st.recursive(
    prims,
    lambda inner: st.one_of(
        st.lists(inner, max_size=4).map(Value.of_list),
        st.dictionaries(st.text(min_size=1, max_size=8), inner, max_size=4).map(Value.of_record),
    ),
    max_leaves=12,
)


@given(values)
@settings(max_examples=300)
def test_canonical_roundtrip(v):
    assert value_from_canonical_bytes(canonical_bytes(v)) == v


@given(values)
@settings(max_examples=200)
def test_canonical_bytes_stable_under_reencode(v):
    raw = canonical_bytes(v)
    assert canonical_bytes(value_from_canonical_bytes(raw)) == raw


def test_decode_rejects_malformed():
    bad = [
        b"[]",
        b'{"t":"int"}',
        b'{"t":"int","v":3}',
        b'{"t":"int","v":"3","extra":1}',
        b'{"t":"float","v":1.5}',
        b'{"t":"bool","v":"true"}',
        b'{"t":"bytes","v":"!!!"}',
        b'{"t":"int","v":"99999999999999999999"}',
        b'{"t":"mystery","v":null}',
        b"not json",
    ]
    for raw in bad:
        with pytest.raises(CanonicalDecodeError):
            value_from_canonical_bytes(raw)


# --- plain codec --------------------------------------------------------------------


def test_plain_roundtrip_schema_directed():
    schema = Schema(
        {
            "flag": BOOL,
            "count": INT,
            "ratio": FLOAT,
            "name": STRING,
            "blob": BYTES,
            "tags": ListOf(STRING),
            "inner": RecordOf(Schema({"n": INT})),
        }
    )
    plain = {
        "flag": True,
        "count": 5,
        "ratio": 2.5,
        "name": "x",
        "blob": "AP8=",
        "tags": ["a", "b"],
        "inner": {"n": 9},
    }
    v = record_from_plain(plain, schema)
    assert to_plain(v, RecordOf(schema)) == plain


def test_plain_decode_is_strict():
    schema = Schema({"n": INT})
    with pytest.raises(PlainDecodeError):
        record_from_plain({"n": "5"}, schema)
    with pytest.raises(PlainDecodeError):
        record_from_plain({"n": 5, "extra": 1}, schema)
    with pytest.raises(PlainDecodeError):
        record_from_plain({}, schema)
    with pytest.raises(PlainDecodeError):
        record_from_plain({"n": 5.0}, schema)
    with pytest.raises(PlainDecodeError):
        record_from_plain({"n": True}, schema)


def test_plain_float_accepts_int_literals():
    v = record_from_plain({"x": 3}, Schema({"x": FLOAT}))
    assert v.field("x").tag == "float" and v.field("x").payload == 3.0


# --- schema and descriptors -----------------------------------------------------------


def test_schema_fields_sorted():
    s = Schema({"z": INT, "a": BOOL})
    assert [k for k, _ in s.fields] == ["a", "z"]


def test_schema_descriptor_roundtrip():
    s = Schema(
        {
            "a": BOOL,
            "lst": ListOf(INT),
            "rec": RecordOf(Schema({"deep": ListOf(STRING)})),
        }
    )
    assert schema_from_descriptor(schema_descriptor(s)) == s


def test_type_descriptor_roundtrip():
    for t in (BOOL, INT, FLOAT, STRING, BYTES, ListOf(BYTES), RecordOf(Schema({"x": FLOAT}))):
        assert type_from_descriptor(type_descriptor(t)) == t


def test_list_elements_must_be_primitive():
    with pytest.raises(Exception):
        ListOf(RecordOf(Schema({"x": INT})))  # type: ignore[arg-type]


def test_type_of_value():
    assert type_of_value(Value.of_int(1)) == INT
    assert type_of_value(Value.of_list([Value.of_string("a")])) == ListOf(STRING)
    rec = Value.of_record({"n": Value.of_int(1)})
    assert type_of_value(rec) == RecordOf(Schema({"n": INT}))
    with pytest.raises(ValueError_):
        type_of_value(Value.of_list([]))  # element type unknowable
    with pytest.raises(ValueError_):
        type_of_value(Value.of_list([Value.of_int(1), Value.of_string("x")]))


def test_conform_error_paths():
    assert conform_error(Value.of_int(1), INT) is None
    msg = conform_error(Value.of_record({"n": Value.of_string("x")}), RecordOf(Schema({"n": INT})))
    assert msg is not None and "n" in msg
    assert record_conform_error(Value.of_record({}), Schema({"n": INT})) is not None


def test_default_record_conforms():
    schema = Schema({"n": INT, "s": STRING, "l": ListOf(INT), "r": RecordOf(Schema({"b": BOOL}))})
    assert record_conform_error(default_record(schema), schema) is None


def test_canonical_json_uses_compact_sorted_utf8():
    v = Value.of_record({"é": Value.of_string("世")})
    raw = canonical_bytes(v)
    assert b" " not in raw
    assert "é".encode("utf-8") in raw  # ensure_ascii off
    obj = json.loads(raw)
    assert obj == canonical_obj(v)
