import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { formatFloat, parseFloatText } from "../src/floatfmt.js";

const FIXTURES = new URL("./fixtures/floats.txt", import.meta.url);

function floatFromBits(hex: string): number {
  const view = new DataView(new ArrayBuffer(8));
  view.setBigUint64(0, BigInt("0x" + hex));
  return view.getFloat64(0);
}

function bitsOf(x: number): bigint {
  const view = new DataView(new ArrayBuffer(8));
  view.setFloat64(0, x);
  return view.getBigUint64(0);
}

function fixtureLines(): [string, string][] {
  return readFileSync(FIXTURES, "utf-8")
    .split("\n")
    .filter((line) => line.length > 0)
    .map((line) => {
      const space = line.indexOf(" ");
      return [line.slice(0, space), line.slice(space + 1)];
    });
}

describe("formatFloat", () => {
  it("reproduces the engine's rendering for every fixture", () => {
    const mismatches: string[] = [];
    for (const [hex, expected] of fixtureLines()) {
      const got = formatFloat(floatFromBits(hex));
      if (got !== expected) mismatches.push(`${hex}: got ${got}, want ${expected}`);
    }
    expect(mismatches).toEqual([]);
  });

  it("round-trips every fixture bit for bit through parseFloatText", () => {
    for (const [hex, text] of fixtureLines()) {
      expect(bitsOf(parseFloatText(text))).toBe(BigInt("0x" + hex));
    }
  });

  it("uses names for non-finite values", () => {
    expect(formatFloat(NaN)).toBe("NaN");
    expect(formatFloat(Infinity)).toBe("Infinity");
    expect(formatFloat(-Infinity)).toBe("-Infinity");
    expect(Number.isNaN(parseFloatText("NaN"))).toBe(true);
    expect(parseFloatText("Infinity")).toBe(Infinity);
    expect(parseFloatText("-Infinity")).toBe(-Infinity);
  });

  it("keeps the signed zero distinction", () => {
    expect(formatFloat(0)).toBe("0.0");
    expect(formatFloat(-0)).toBe("-0.0");
    expect(Object.is(parseFloatText("-0.0"), -0)).toBe(true);
    expect(Object.is(parseFloatText("0.0"), 0)).toBe(true);
  });

  it("switches to scientific notation exactly at the engine's cutoffs", () => {
    expect(formatFloat(1e15)).toBe("1000000000000000.0");
    expect(formatFloat(1e16)).toBe("1e+16");
    expect(formatFloat(1e-4)).toBe("0.0001");
    expect(formatFloat(1e-5)).toBe("1e-05");
    expect(formatFloat(5e-324)).toBe("5e-324");
    expect(formatFloat(1.7976931348623157e308)).toBe("1.7976931348623157e+308");
  });

  it("rejects text the engine would not have produced", () => {
    for (const bad of ["", "abc", "1.2.3", "0x10", "nan", "inf", "1,5"]) {
      expect(() => parseFloatText(bad)).toThrow(RangeError);
    }
  });
});
