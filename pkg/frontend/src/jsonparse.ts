/**
 * JSON parser that keeps the int/float distinction of number tokens, which
 * JSON.parse erases: "2.0" and "2" both become the number 2 there, but they
 * canonicalize differently. Integer tokens become number or bigint, float
 * tokens become RawFloat. Everything else matches JSON.parse semantics,
 * including last-wins duplicate object keys.
 */

import { CanonicalJson, RawFloat } from "./canonical.js";
import { ParseFailure } from "./errors.js";

export function parseJsonPreserving(text: string): CanonicalJson {
  const p = new Parser(text);
  const value = p.parseValue();
  p.skipWs();
  if (!p.done()) throw p.error("trailing data after JSON value");
  return value;
}

class Parser {
  private pos = 0;

  constructor(private readonly text: string) {}

  done(): boolean {
    return this.pos >= this.text.length;
  }

  error(message: string): ParseFailure {
    return new ParseFailure(`${message} at offset ${this.pos}`);
  }

  skipWs(): void {
    while (this.pos < this.text.length && " \t\n\r".includes(this.text[this.pos]!)) this.pos++;
  }

  private expect(ch: string): void {
    if (this.text[this.pos] !== ch) throw this.error(`expected ${JSON.stringify(ch)}`);
    this.pos++;
  }

  parseValue(): CanonicalJson {
    this.skipWs();
    const ch = this.text[this.pos];
    if (ch === undefined) throw this.error("unexpected end of input");
    if (ch === "{") return this.parseObject();
    if (ch === "[") return this.parseArray();
    if (ch === '"') return this.parseString();
    if (ch === "t" || ch === "f" || ch === "n") return this.parseKeyword();
    if (ch === "-" || (ch >= "0" && ch <= "9")) return this.parseNumber();
    throw this.error(`unexpected character ${JSON.stringify(ch)}`);
  }

  private parseKeyword(): CanonicalJson {
    for (const [word, value] of [
      ["true", true],
      ["false", false],
      ["null", null],
    ] as const) {
      if (this.text.startsWith(word, this.pos)) {
        this.pos += word.length;
        return value;
      }
    }
    throw this.error("invalid literal");
  }

  private parseNumber(): CanonicalJson {
    const m = /^-?(?:0|[1-9][0-9]*)(\.[0-9]+)?([eE][+-]?[0-9]+)?/.exec(this.text.slice(this.pos));
    if (!m || m[0].length === 0) throw this.error("invalid number");
    const token = m[0];
    this.pos += token.length;
    if (m[1] === undefined && m[2] === undefined) {
      const big = BigInt(token);
      return big >= BigInt(Number.MIN_SAFE_INTEGER) && big <= BigInt(Number.MAX_SAFE_INTEGER) ? Number(big) : big;
    }
    const x = Number(token);
    if (!Number.isFinite(x)) throw this.error("number out of range");
    return new RawFloat(x);
  }

  private parseString(): string {
    this.expect('"');
    let out = "";
    for (;;) {
      const ch = this.text[this.pos];
      if (ch === undefined) throw this.error("unterminated string");
      if (ch === '"') {
        this.pos++;
        return out;
      }
      if (ch === "\\") {
        this.pos++;
        const esc = this.text[this.pos];
        if (esc === undefined) throw this.error("unterminated escape");
        this.pos++;
        switch (esc) {
          case '"':
          case "\\":
          case "/":
            out += esc;
            break;
          case "b":
            out += "\b";
            break;
          case "f":
            out += "\f";
            break;
          case "n":
            out += "\n";
            break;
          case "r":
            out += "\r";
            break;
          case "t":
            out += "\t";
            break;
          case "u": {
            const hex = this.text.slice(this.pos, this.pos + 4);
            if (!/^[0-9a-fA-F]{4}$/.test(hex)) throw this.error("invalid \\u escape");
            this.pos += 4;
            out += String.fromCharCode(parseInt(hex, 16));
            break;
          }
          default:
            throw this.error(`invalid escape \\${esc}`);
        }
      } else {
        if (ch.charCodeAt(0) < 0x20) throw this.error("unescaped control character in string");
        out += ch;
        this.pos++;
      }
    }
  }

  private parseArray(): CanonicalJson[] {
    this.expect("[");
    const out: CanonicalJson[] = [];
    this.skipWs();
    if (this.text[this.pos] === "]") {
      this.pos++;
      return out;
    }
    for (;;) {
      out.push(this.parseValue());
      this.skipWs();
      const ch = this.text[this.pos];
      if (ch === ",") {
        this.pos++;
        continue;
      }
      if (ch === "]") {
        this.pos++;
        return out;
      }
      throw this.error("expected ',' or ']'");
    }
  }

  private parseObject(): { [key: string]: CanonicalJson } {
    this.expect("{");
    const out: { [key: string]: CanonicalJson } = Object.create(null);
    this.skipWs();
    if (this.text[this.pos] === "}") {
      this.pos++;
      return out;
    }
    for (;;) {
      this.skipWs();
      const key = this.parseString();
      this.skipWs();
      this.expect(":");
      out[key] = this.parseValue();
      this.skipWs();
      const ch = this.text[this.pos];
      if (ch === ",") {
        this.pos++;
        continue;
      }
      if (ch === "}") {
        this.pos++;
        return out;
      }
      throw this.error("expected ',' or '}'");
    }
  }
}
