import { describe, expect, it } from "vitest";
import {
  INT64_MAX,
  INT64_MIN,
  Schema,
  V,
  canonicalDigest,
  canonicalLine,
  conformError,
  listOf,
  plainStateText,
  plainText,
  recordConformError,
  recordOf,
  valueFromCanonicalText,
  valuesEqual,
} from "../src/values.js";
import { schemaDescriptor, schemaFromDescriptor } from "../src/values.js";
import { ParseFailure, SchemaBridgeError } from "../src/errors.js";

describe("canonical encoding", () => {
  it("encodes each payload kind to the exact wire bytes", () => {
    expect(canonicalLine(V.bool(true))).toBe('{"t":"bool","v":true}');
    expect(canonicalLine(V.int(42))).toBe('{"t":"int","v":"42"}');
    expect(canonicalLine(V.int(INT64_MIN))).toBe('{"t":"int","v":"-9223372036854775808"}');
    expect(canonicalLine(V.float(2))).toBe('{"t":"float","v":"2.0"}');
    expect(canonicalLine(V.float(1e16))).toBe('{"t":"float","v":"1e+16"}');
    expect(canonicalLine(V.float(-0))).toBe('{"t":"float","v":"-0.0"}');
    expect(canonicalLine(V.float(NaN))).toBe('{"t":"float","v":"NaN"}');
    expect(canonicalLine(V.string("hi"))).toBe('{"t":"string","v":"hi"}');
    expect(canonicalLine(V.bytes(new TextEncoder().encode("hi")))).toBe('{"t":"bytes","v":"aGk="}');
    expect(canonicalLine(V.list([V.int(1), V.int(2)]))).toBe(
      '{"t":"list","v":[{"t":"int","v":"1"},{"t":"int","v":"2"}]}',
    );
  });

  it("sorts record keys by code point, not UTF-16 code unit", () => {
    // U+FF21 sorts before U+10000 by code point; UTF-16 unit order says otherwise.
    const rec = V.record([
      ["\u{10000}", V.int(2)],
      ["Ａ", V.int(1)],
    ]);
    expect(canonicalLine(rec)).toBe('{"t":"record","v":{"Ａ":{"t":"int","v":"1"},"\u{10000}":{"t":"int","v":"2"}}}');
  });

  it("sorts plain record keys the same way the builder sorts document members", () => {
    const rec = V.record({ b: V.int(2), a: V.int(1) });
    expect(canonicalLine(rec)).toBe('{"t":"record","v":{"a":{"t":"int","v":"1"},"b":{"t":"int","v":"2"}}}');
  });

  it("hashes the canonical line", () => {
    expect(canonicalDigest(V.int(42))).toBe("c618e883347f9717bebf5d08ac39c11a1c61c75de8709d3520871d7ca5f21eac");
  });
});

describe("canonical decoding", () => {
  it("round-trips a nested value through text", () => {
    const value = V.record({
      floats: V.list([V.float(0.1), V.float(-0), V.float(NaN)]),
      blob: V.bytes(new Uint8Array([0, 255, 10])),
      big: V.int(INT64_MAX),
      inner: V.record({ ok: V.bool(false), name: V.string("π 🧪") }),
    });
    const decoded = valueFromCanonicalText(canonicalLine(value));
    expect(valuesEqual(decoded, value)).toBe(true);
    expect(canonicalLine(decoded)).toBe(canonicalLine(value));
  });

  it("rejects payloads that are shaped wrong", () => {
    const bad = [
      '{"t":"int","v":42}',
      '{"t":"float","v":2.5}',
      '{"t":"set","v":[]}',
      '{"t":"int","v":"1","x":1}',
      '{"t":"int"}',
      '{"t":"bytes","v":"a;=="}',
      '{"t":"bytes","v":"aGk"}',
      '{"t":"record","v":[]}',
      '{"t":"int","v":"9223372036854775808"}',
      '{"t":"int","v":"1.5"}',
      "null",
      "[]",
    ];
    for (const line of bad) {
      expect(() => valueFromCanonicalText(line), line).toThrow(ParseFailure);
    }
  });
});

describe("construction checks", () => {
  it("enforces the 64-bit integer range", () => {
    expect(canonicalLine(V.int(INT64_MAX))).toContain("9223372036854775807");
    expect(() => V.int(INT64_MAX + 1n)).toThrow(SchemaBridgeError);
    expect(() => V.int(INT64_MIN - 1n)).toThrow(SchemaBridgeError);
    expect(() => V.int(1.5)).toThrow(SchemaBridgeError);
    expect(() => V.int(2 ** 53)).toThrow(SchemaBridgeError);
  });

  it("rejects lone surrogates, which cannot cross the boundary losslessly", () => {
    expect(() => V.string("\uD800")).toThrow(SchemaBridgeError);
    expect(() => V.string("ok\uDC00ok")).toThrow(SchemaBridgeError);
    expect(() => V.record([["\uD800x", V.int(1)]])).toThrow(SchemaBridgeError);
    expect(canonicalLine(V.string("🧪"))).toBe('{"t":"string","v":"🧪"}');
  });

  it("rejects duplicate and empty record keys", () => {
    expect(() =>
      V.record([
        ["a", V.int(1)],
        ["a", V.int(2)],
      ]),
    ).toThrow(SchemaBridgeError);
    expect(() => V.record([["", V.int(1)]])).toThrow(SchemaBridgeError);
  });
});

describe("schema conformance", () => {
  const schema = new Schema({ a: "int", b: "string" });

  it("reports mismatches with the engine's wording", () => {
    expect(conformError(V.int(1), "string")).toBe("<root>: expected string, got int");
    expect(conformError(V.string("x"), "string")).toBeNull();
    expect(recordConformError(V.record({ a: V.int(1) }), schema)).toBe("<root>: missing fields: b");
    expect(recordConformError(V.record({ a: V.int(1), b: V.string("x"), c: V.bool(true) }), schema)).toBe(
      "<root>: unexpected fields: c",
    );
  });

  it("names the offending path in nested records and lists", () => {
    const nested = new Schema({ meta: recordOf({ x: "int" }), tags: listOf("string") });
    const bad = V.record({ meta: V.record({ x: V.float(1) }), tags: V.list([V.string("ok")]) });
    expect(recordConformError(bad, nested)).toBe("meta.x: expected int, got float");
    const badTag = V.record({ meta: V.record({ x: V.int(1) }), tags: V.list([V.string("ok"), V.int(3)]) });
    expect(recordConformError(badTag, nested)).toBe("tags[1]: expected string, got int");
  });
});

describe("plain rendering", () => {
  it("renders 64-bit integers exactly", () => {
    expect(plainText(V.int(INT64_MAX))).toBe("9223372036854775807");
    expect(plainText(V.int(INT64_MIN))).toBe("-9223372036854775808");
  });

  it("renders floats in the engine's format and sorts record keys", () => {
    expect(plainText(V.float(2))).toBe("2.0");
    expect(plainText(V.record({ b: V.float(1e16), a: V.string("x") }))).toBe('{"a":"x","b":1e+16}');
  });

  it("renders a state file as one flat plain object", () => {
    expect(plainStateText({ n: V.int(5), label: V.string("hot") })).toBe('{"label":"hot","n":5}');
  });
});

describe("schema descriptors", () => {
  it("round-trips nested schemas through the document form", () => {
    const schema = new Schema({
      n: "int",
      tags: listOf("string"),
      meta: recordOf({ depth: "int", blob: "bytes" }),
    });
    const restored = schemaFromDescriptor(schemaDescriptor(schema));
    expect(schemaDescriptor(restored)).toEqual(schemaDescriptor(schema));
    expect(restored.names()).toEqual(["meta", "n", "tags"]);
  });
});
