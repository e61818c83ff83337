/**
 * Canonical JSON rendering: object keys sorted by code point, compact
 * separators, UTF-8 bytes. Every hash on either side of the boundary is
 * computed over text produced by these rules, so the writer is strict:
 * plain numbers must be integers (JSON.stringify would render 2.0 as "2"),
 * and floats travel as RawFloat wrappers rendered in the engine's fixed
 * shortest round-trip format.
 */

import { createHash } from "node:crypto";
import { formatFloat } from "./floatfmt.js";
import { SchemaBridgeError } from "./errors.js";

/** A JSON number that must render as a float ("2.0", "1e+16"), never an int. */
export class RawFloat {
  constructor(readonly value: number) {
    if (!Number.isFinite(value)) {
      throw new SchemaBridgeError(`non-finite float in canonical JSON: ${value}`);
    }
  }
}

export type CanonicalJson =
  | null
  | boolean
  | number
  | bigint
  | string
  | RawFloat
  | CanonicalJson[]
  | { [key: string]: CanonicalJson };

/** True when the string has no lone surrogates, i.e. it has a UTF-8 form. */
export function isWellFormedText(s: string): boolean {
  for (let i = 0; i < s.length; i++) {
    const c = s.charCodeAt(i);
    if (c >= 0xd800 && c <= 0xdbff) {
      const d = s.charCodeAt(i + 1);
      if (!(d >= 0xdc00 && d <= 0xdfff)) return false;
      i++;
    } else if (c >= 0xdc00 && c <= 0xdfff) {
      return false;
    }
  }
  return true;
}

/** Code-point string order, the collation sorted object keys use. */
export function compareCodePoints(a: string, b: string): number {
  const ia = a[Symbol.iterator]();
  const ib = b[Symbol.iterator]();
  for (;;) {
    const x = ia.next();
    const y = ib.next();
    if (x.done && y.done) return 0;
    if (x.done) return -1;
    if (y.done) return 1;
    const cx = x.value.codePointAt(0)!;
    const cy = y.value.codePointAt(0)!;
    if (cx !== cy) return cx < cy ? -1 : 1;
  }
}

export function canonicalStringify(x: CanonicalJson): string {
  if (x === null) return "null";
  if (typeof x === "boolean") return x ? "true" : "false";
  if (typeof x === "bigint") return x.toString();
  if (typeof x === "number") {
    if (!Number.isInteger(x)) {
      throw new SchemaBridgeError(`plain number ${x} is not an integer; wrap floats in RawFloat`);
    }
    if (!Number.isSafeInteger(x)) {
      throw new SchemaBridgeError(`integer ${x} exceeds safe range; use a bigint`);
    }
    return String(x);
  }
  if (typeof x === "string") {
    if (!isWellFormedText(x)) {
      throw new SchemaBridgeError("string contains a lone surrogate and has no UTF-8 form");
    }
    return JSON.stringify(x);
  }
  if (x instanceof RawFloat) return formatFloat(x.value);
  if (Array.isArray(x)) return "[" + x.map(canonicalStringify).join(",") + "]";

  const keys = Object.keys(x).sort(compareCodePoints);
  const members = keys.map((k) => {
    if (!isWellFormedText(k)) {
      throw new SchemaBridgeError("object key contains a lone surrogate");
    }
    return JSON.stringify(k) + ":" + canonicalStringify(x[k]!);
  });
  return "{" + members.join(",") + "}";
}

export function canonicalJsonBytes(x: CanonicalJson): Buffer {
  return Buffer.from(canonicalStringify(x), "utf-8");
}

export function sha256Hex(data: Buffer | string): string {
  return createHash("sha256").update(data).digest("hex");
}

export function digestOf(x: CanonicalJson): string {
  return sha256Hex(canonicalJsonBytes(x));
}
