/**
 * Typed values and schemas mirroring the engine's data model, with the same
 * canonical encoding byte for byte: tagged JSON, sorted record keys, int
 * payloads as decimal strings (JSON numbers would lose 64-bit ints here),
 * float payloads in the fixed shortest round-trip format, bytes as base64.
 */

import {
  CanonicalJson,
  canonicalJsonBytes,
  canonicalStringify,
  compareCodePoints,
  isWellFormedText,
  sha256Hex,
} from "./canonical.js";
import { formatFloat, parseFloatText } from "./floatfmt.js";
import { ParseFailure, SchemaBridgeError } from "./errors.js";

export const INT64_MIN = -(2n ** 63n);
export const INT64_MAX = 2n ** 63n - 1n;

// --- value model ---------------------------------------------------------------

export type Value =
  | { readonly t: "bool"; readonly v: boolean }
  | { readonly t: "int"; readonly v: bigint }
  | { readonly t: "float"; readonly v: number }
  | { readonly t: "string"; readonly v: string }
  | { readonly t: "bytes"; readonly v: Uint8Array }
  | { readonly t: "list"; readonly v: readonly Value[] }
  | { readonly t: "record"; readonly v: ReadonlyMap<string, Value> };

function checkText(s: string, what: string): string {
  if (typeof s !== "string") {
    throw new SchemaBridgeError(`${what} must be a string`);
  }
  if (!isWellFormedText(s)) {
    throw new SchemaBridgeError(`${what} contains a lone surrogate and cannot cross the boundary`);
  }
  return s;
}

/** Value constructors. Payloads are range-checked and normalized here. */
export const V = {
  bool(b: boolean): Value {
    if (typeof b !== "boolean") throw new SchemaBridgeError(`expected boolean, got ${typeof b}`);
    return { t: "bool", v: b };
  },

  int(i: number | bigint): Value {
    let big: bigint;
    if (typeof i === "bigint") {
      big = i;
    } else if (typeof i === "number" && Number.isSafeInteger(i)) {
      big = BigInt(i);
    } else {
      throw new SchemaBridgeError(`expected an integer, got ${typeof i === "number" ? i : typeof i}`);
    }
    if (big < INT64_MIN || big > INT64_MAX) {
      throw new SchemaBridgeError(`int out of 64-bit range: ${big}`);
    }
    return { t: "int", v: big };
  },

  float(x: number): Value {
    if (typeof x !== "number") throw new SchemaBridgeError(`expected number, got ${typeof x}`);
    return { t: "float", v: x };
  },

  string(s: string): Value {
    return { t: "string", v: checkText(s, "string value") };
  },

  bytes(b: Uint8Array): Value {
    if (!(b instanceof Uint8Array)) throw new SchemaBridgeError("expected Uint8Array");
    return { t: "bytes", v: new Uint8Array(b) };
  },

  list(items: Iterable<Value>): Value {
    const copy = [...items];
    for (const item of copy) assertValue(item);
    return { t: "list", v: copy };
  },

  record(fields: Record<string, Value> | Iterable<[string, Value]> | ReadonlyMap<string, Value>): Value {
    const entries =
      fields instanceof Map
        ? [...fields.entries()]
        : Symbol.iterator in Object(fields) && !(typeof fields === "string")
          ? [...(fields as Iterable<[string, Value]>)]
          : Object.entries(fields as Record<string, Value>);
    const map = new Map<string, Value>();
    for (const [name, value] of entries) {
      checkText(name, "record key");
      if (name.length === 0) throw new SchemaBridgeError("record keys must be non-empty");
      if (map.has(name)) throw new SchemaBridgeError(`duplicate record key ${JSON.stringify(name)}`);
      assertValue(value);
      map.set(name, value);
    }
    const sorted = new Map([...map.entries()].sort((a, b) => compareCodePoints(a[0], b[0])));
    return { t: "record", v: sorted };
  },
};

function assertValue(v: unknown): asserts v is Value {
  if (
    typeof v !== "object" ||
    v === null ||
    typeof (v as { t?: unknown }).t !== "string" ||
    !("v" in (v as object))
  ) {
    throw new SchemaBridgeError("expected a Value");
  }
}

export function recordField(value: Value, name: string): Value {
  if (value.t !== "record") throw new SchemaBridgeError(`not a record: ${value.t}`);
  const got = value.v.get(name);
  if (got === undefined) throw new SchemaBridgeError(`record has no field ${JSON.stringify(name)}`);
  return got;
}

// --- schemas ---------------------------------------------------------------------

export type Primitive = "bool" | "int" | "float" | "string" | "bytes";
export type FieldType = Primitive | { readonly list: Primitive } | { readonly record: Schema };

const PRIMITIVES: readonly Primitive[] = ["bool", "int", "float", "string", "bytes"];

export function listOf(elem: Primitive): FieldType {
  if (!PRIMITIVES.includes(elem)) throw new SchemaBridgeError(`list element type must be primitive, got ${elem}`);
  return { list: elem };
}

export function recordOf(inner: Schema | Record<string, FieldType>): FieldType {
  return { record: inner instanceof Schema ? inner : new Schema(inner) };
}

/** An ordered set of uniquely named, typed fields; order is normalized. */
export class Schema {
  readonly fields: ReadonlyMap<string, FieldType>;

  constructor(fields: Record<string, FieldType> | Iterable<[string, FieldType]> = {}) {
    const entries =
      Symbol.iterator in Object(fields) ? [...(fields as Iterable<[string, FieldType]>)] : Object.entries(fields);
    const map = new Map<string, FieldType>();
    for (const [name, ftype] of entries) {
      checkText(name, "field name");
      if (name.length === 0) throw new SchemaBridgeError("field names must be non-empty");
      if (map.has(name)) throw new SchemaBridgeError(`duplicate field name ${JSON.stringify(name)}`);
      checkFieldType(ftype);
      map.set(name, ftype);
    }
    this.fields = new Map([...map.entries()].sort((a, b) => compareCodePoints(a[0], b[0])));
  }

  names(): string[] {
    return [...this.fields.keys()];
  }

  get(name: string): FieldType | undefined {
    return this.fields.get(name);
  }

  has(name: string): boolean {
    return this.fields.has(name);
  }
}

function checkFieldType(t: FieldType): void {
  if (typeof t === "string") {
    if (!PRIMITIVES.includes(t)) throw new SchemaBridgeError(`unknown primitive type ${JSON.stringify(t)}`);
    return;
  }
  if (typeof t === "object" && t !== null) {
    if ("list" in t) {
      if (!PRIMITIVES.includes(t.list)) throw new SchemaBridgeError("list element type must be primitive");
      return;
    }
    if ("record" in t && t.record instanceof Schema) return;
  }
  throw new SchemaBridgeError(`invalid field type ${JSON.stringify(t)}`);
}

export const EMPTY_SCHEMA = new Schema();

// --- schema descriptors -----------------------------------------------------------

export function typeDescriptor(t: FieldType): CanonicalJson {
  if (typeof t === "string") return t;
  if ("list" in t) return { list: t.list };
  return { record: schemaDescriptor(t.record) };
}

export function schemaDescriptor(schema: Schema): { [key: string]: CanonicalJson } {
  const out: { [key: string]: CanonicalJson } = {};
  for (const [name, ftype] of schema.fields) out[name] = typeDescriptor(ftype);
  return out;
}

export function typeFromDescriptor(obj: unknown, where = "<root>"): FieldType {
  if (typeof obj === "string") {
    if (PRIMITIVES.includes(obj as Primitive)) return obj as Primitive;
    throw new ParseFailure(`${where}: unknown type name ${JSON.stringify(obj)}`);
  }
  if (typeof obj === "object" && obj !== null && !Array.isArray(obj) && Object.keys(obj).length === 1) {
    const rec = obj as Record<string, unknown>;
    if ("list" in rec) {
      const elem = typeFromDescriptor(rec["list"], `${where}.list`);
      if (typeof elem !== "string") throw new ParseFailure(`${where}: list element type must be primitive`);
      return { list: elem };
    }
    if ("record" in rec) return { record: schemaFromDescriptor(rec["record"], `${where}.record`) };
  }
  throw new ParseFailure(`${where}: malformed type descriptor`);
}

export function schemaFromDescriptor(obj: unknown, where = "<root>"): Schema {
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new ParseFailure(`${where}: schema descriptor must be an object`);
  }
  const entries: [string, FieldType][] = [];
  for (const [name, t] of Object.entries(obj)) {
    entries.push([name, typeFromDescriptor(t, `${where}.${name}`)]);
  }
  try {
    return new Schema(entries);
  } catch (exc) {
    throw new ParseFailure(`${where}: ${(exc as Error).message}`);
  }
}

// --- conformance -------------------------------------------------------------------

export function conformError(value: Value, ftype: FieldType, path = ""): string | null {
  const where = path || "<root>";
  if (typeof ftype === "string") {
    return value.t === ftype ? null : `${where}: expected ${ftype}, got ${value.t}`;
  }
  if ("list" in ftype) {
    if (value.t !== "list") return `${where}: expected list, got ${value.t}`;
    for (let i = 0; i < value.v.length; i++) {
      const err = conformError(value.v[i]!, ftype.list, `${where}[${i}]`);
      if (err) return err;
    }
    return null;
  }
  if (value.t !== "record") return `${where}: expected record, got ${value.t}`;
  return recordConformError(value, ftype.record, path);
}

export function recordConformError(value: Value, schema: Schema, path = ""): string | null {
  const where = path || "<root>";
  if (value.t !== "record") return `${where}: expected record, got ${value.t}`;
  const present = new Set(value.v.keys());
  const missing = schema.names().filter((n) => !present.has(n));
  const extra = [...present].filter((n) => !schema.has(n)).sort(compareCodePoints);
  if (missing.length) return `${where}: missing fields: ${missing.join(", ")}`;
  if (extra.length) return `${where}: unexpected fields: ${extra.join(", ")}`;
  for (const [name, ftype] of schema.fields) {
    const err = conformError(value.v.get(name)!, ftype, path ? `${where}.${name}` : name);
    if (err) return err;
  }
  return null;
}

// --- canonical codec ------------------------------------------------------------------

export function canonicalObj(value: Value): CanonicalJson {
  switch (value.t) {
    case "bool":
      return { t: "bool", v: value.v };
    case "int":
      return { t: "int", v: value.v.toString() };
    case "float":
      return { t: "float", v: formatFloat(value.v) };
    case "string":
      return { t: "string", v: value.v };
    case "bytes":
      return { t: "bytes", v: Buffer.from(value.v).toString("base64") };
    case "list":
      return { t: "list", v: value.v.map(canonicalObj) };
    case "record": {
      const fields: { [key: string]: CanonicalJson } = {};
      for (const [name, item] of value.v) fields[name] = canonicalObj(item);
      return { t: "record", v: fields };
    }
  }
}

export function canonicalLine(value: Value): string {
  return canonicalStringify(canonicalObj(value));
}

export function canonicalBytes(value: Value): Buffer {
  return canonicalJsonBytes(canonicalObj(value));
}

export function canonicalDigest(value: Value): string {
  return sha256Hex(canonicalBytes(value));
}

const INT_TEXT = /^[+-]?[0-9]+$/;
const BASE64_TEXT = /^[A-Za-z0-9+/]*={0,2}$/;

export function valueFromCanonicalObj(obj: unknown): Value {
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new ParseFailure("expected a tagged {t, v} object");
  }
  const keys = Object.keys(obj);
  if (keys.length !== 2 || !("t" in obj) || !("v" in obj)) {
    throw new ParseFailure("expected a tagged {t, v} object");
  }
  const { t, v } = obj as { t: unknown; v: unknown };
  try {
    switch (t) {
      case "bool":
        if (typeof v !== "boolean") throw new ParseFailure("bool payload must be true/false");
        return V.bool(v);
      case "int":
        if (typeof v !== "string" || !INT_TEXT.test(v)) {
          throw new ParseFailure("int payload must be a decimal string");
        }
        return V.int(BigInt(v));
      case "float":
        if (typeof v !== "string") throw new ParseFailure("float payload must be a string");
        return V.float(parseFloatText(v));
      case "string":
        if (typeof v !== "string") throw new ParseFailure("string payload must be a string");
        return V.string(v);
      case "bytes":
        if (typeof v !== "string" || !BASE64_TEXT.test(v) || v.length % 4 !== 0) {
          throw new ParseFailure("bytes payload must be base64");
        }
        return V.bytes(Buffer.from(v, "base64"));
      case "list":
        if (!Array.isArray(v)) throw new ParseFailure("list payload must be an array");
        return V.list(v.map(valueFromCanonicalObj));
      case "record": {
        if (typeof v !== "object" || v === null || Array.isArray(v)) {
          throw new ParseFailure("record payload must be an object");
        }
        const fields: [string, Value][] = [];
        for (const [name, item] of Object.entries(v)) fields.push([name, valueFromCanonicalObj(item)]);
        return V.record(fields);
      }
      default:
        throw new ParseFailure(`unknown tag ${JSON.stringify(t)}`);
    }
  } catch (exc) {
    if (exc instanceof ParseFailure) throw exc;
    throw new ParseFailure((exc as Error).message);
  }
}

export function valueFromCanonicalText(line: string): Value {
  let obj: unknown;
  try {
    obj = JSON.parse(line);
  } catch (exc) {
    throw new ParseFailure(`invalid JSON: ${(exc as Error).message}`);
  }
  return valueFromCanonicalObj(obj);
}

// --- plain rendering --------------------------------------------------------------------

/**
 * Render a value as plain JSON text, the shape the engine's schema-directed
 * decoder reads (initial-state files, scripted agent finals): untagged, ints
 * as bare decimals, non-finite floats as their quoted names.
 */
export function plainText(value: Value): string {
  switch (value.t) {
    case "bool":
      return value.v ? "true" : "false";
    case "int":
      return value.v.toString();
    case "float":
      return Number.isFinite(value.v) ? formatFloat(value.v) : JSON.stringify(formatFloat(value.v));
    case "string":
      return JSON.stringify(value.v);
    case "bytes":
      return JSON.stringify(Buffer.from(value.v).toString("base64"));
    case "list":
      return "[" + value.v.map(plainText).join(",") + "]";
    case "record": {
      const members = [...value.v.entries()].map(([name, item]) => JSON.stringify(name) + ":" + plainText(item));
      return "{" + members.join(",") + "}";
    }
  }
}

/** Plain JSON text for a flat mapping of state keys to values. */
export function plainStateText(state: ReadonlyMap<string, Value> | Record<string, Value>): string {
  const entries = state instanceof Map ? [...state.entries()] : Object.entries(state);
  entries.sort((a, b) => compareCodePoints(a[0], b[0]));
  return "{" + entries.map(([key, value]) => JSON.stringify(key) + ":" + plainText(value)).join(",") + "}";
}

export function valuesEqual(a: Value, b: Value): boolean {
  return canonicalLine(a) === canonicalLine(b);
}
