/**
 * Shortest round-trip decimal rendering of IEEE doubles, matching the
 * engine's fixed format byte for byte so canonical encodings agree across
 * languages. The digits come from toExponential(), which is shortest
 * round-trip; what differs between hosts is only the fixed/scientific
 * layout, normalized here:
 *
 * - scientific form when the decimal exponent is < -4 or >= 16, with a
 *   signed exponent of at least two digits ("1e+16", "5e-05", "5e-324");
 * - fixed form otherwise, always keeping a fractional part ("2.0", "0.125");
 * - non-finite values use the names "NaN", "Infinity", "-Infinity".
 */

export function formatFloat(x: number): string {
  if (Number.isNaN(x)) return "NaN";
  if (x === Infinity) return "Infinity";
  if (x === -Infinity) return "-Infinity";
  if (x === 0) return Object.is(x, -0) ? "-0.0" : "0.0";

  const neg = x < 0;
  const parts = Math.abs(x).toExponential().split("e");
  const exponent = parseInt(parts[1]!, 10);
  const digits = parts[0]!.replace(".", "");

  let out: string;
  if (exponent < -4 || exponent >= 16) {
    const mantissa = digits.length === 1 ? digits : digits[0] + "." + digits.slice(1);
    const sign = exponent < 0 ? "-" : "+";
    out = mantissa + "e" + sign + String(Math.abs(exponent)).padStart(2, "0");
  } else if (exponent >= 0) {
    out =
      exponent + 1 >= digits.length
        ? digits + "0".repeat(exponent + 1 - digits.length) + ".0"
        : digits.slice(0, exponent + 1) + "." + digits.slice(exponent + 1);
  } else {
    out = "0." + "0".repeat(-exponent - 1) + digits;
  }
  return neg ? "-" + out : out;
}

export function parseFloatText(s: string): number {
  if (s === "NaN") return NaN;
  if (s === "Infinity") return Infinity;
  if (s === "-Infinity") return -Infinity;
  if (!/^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$/.test(s.trim())) {
    throw new RangeError(`not a decimal float: ${JSON.stringify(s)}`);
  }
  return Number(s);
}
