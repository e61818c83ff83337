"""Boolean guard expression language over workflow state.

Grammar (loosest to tightest binding):

    expr        := or_expr
    or_expr     := and_expr ("or" and_expr)*
    and_expr    := not_expr ("and" not_expr)*
    not_expr    := "not" not_expr | comparison
    comparison  := additive (("=="|"!="|"<"|"<="|">"|">=") additive)?
    additive    := multiplicative (("+"|"-") multiplicative)*
    multiplicative := unary (("*"|"/") unary)*
    unary       := "-" unary | primary
    primary     := literal | path | "has" "(" path ")" | "len" "(" expr ")"
                 | "(" expr ")"
    path        := ident ("." ident)*

Comparisons are non-associative: ``a < b < c`` is a parse error. State is
addressed by dotted paths; the first segment is the store key, the rest
navigate record fields.

Semantics notes (normative for any re-implementation):
- and/or short-circuit left to right; every other operator is strict.
- Arithmetic never mixes int and float. Ints are 64-bit signed; overflow
  raises EvalError("int-overflow"). Integer division truncates toward zero;
  division by integer zero raises EvalError("division-by-zero").
- Float arithmetic is IEEE-754 (division by zero yields inf/-inf/nan), but
  comparing NaN with anything raises EvalError("nan-comparison").
- String comparison is by code point, which equals canonical UTF-8 byte
  order (UTF-8 preserves code-point order).
- len() counts code points for strings and elements for lists.
- has(path) is total and never a type error, even for unknown keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

from .errors import EvalError, LexError, MissingKey, ParseError, PredicateTypeError, ScopeViolation, UnknownStateKey
from .values import (
    BOOL,
    FLOAT,
    INT,
    INT64_MAX,
    INT64_MIN,
    STRING,
    FieldType,
    ListOf,
    Primitive,
    RecordOf,
    Schema,
    Value,
    format_float,
)

# --- tokens -----------------------------------------------------------------

_KEYWORDS = {"and", "or", "not", "true", "false"}
_OPS = ("==", "!=", "<=", ">=", "<", ">", "+", "-", "*", "/")
_PUNCT = {"(": "lparen", ")": "rparen", ",": "comma", ".": "dot"}


@dataclass(frozen=True)
class Token:
    kind: str  # ident|int|float|string|bool|op|lparen|rparen|comma|dot|eof
    lexeme: str
    offset: int


def tokenize(source: str) -> list[Token]:
    """Split source into tokens. Offsets index into ``source`` such that
    source[t.offset : t.offset + len(t.lexeme)] == t.lexeme for every token."""
    out: list[Token] = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < n and source[j].isdigit():
                j += 1
            is_float = False
            if j < n and source[j] == "." and j + 1 < n and source[j + 1].isdigit():
                is_float = True
                j += 1
                while j < n and source[j].isdigit():
                    j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    is_float = True
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            out.append(Token("float" if is_float else "int", source[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            word = source[i:j]
            if word in ("true", "false"):
                out.append(Token("bool", word, i))
            elif word in ("and", "or", "not"):
                out.append(Token("op", word, i))
            else:
                out.append(Token("ident", word, i))
            i = j
            continue
        if c == '"':
            j = i + 1
            while j < n:
                if source[j] == "\\":
                    j += 2
                    continue
                if source[j] == '"':
                    break
                j += 1
            if j >= n:
                raise LexError(i, "unterminated string literal")
            out.append(Token("string", source[i : j + 1], i))
            i = j + 1
            continue
        two = source[i : i + 2]
        if two in ("==", "!=", "<=", ">="):
            out.append(Token("op", two, i))
            i += 2
            continue
        if c in "<>+-*/":
            out.append(Token("op", c, i))
            i += 1
            continue
        if c in _PUNCT:
            out.append(Token(_PUNCT[c], c, i))
            i += 1
            continue
        raise LexError(i, f"unexpected character {c!r}")
    out.append(Token("eof", "", n))
    return out


def _unquote(lexeme: str, offset: int) -> str:
    body = lexeme[1:-1]
    out: list[str] = []
    i = 0
    while i < len(body):
        c = body[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        if i + 1 >= len(body):
            raise LexError(offset + 1 + i, "dangling escape")
        e = body[i + 1]
        simple = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r"}
        if e in simple:
            out.append(simple[e])
            i += 2
        elif e == "u":
            hexpart = body[i + 2 : i + 6]
            if len(hexpart) != 4:
                raise LexError(offset + 1 + i, "truncated \\u escape")
            try:
                out.append(chr(int(hexpart, 16)))
            except ValueError as exc:
                raise LexError(offset + 1 + i, f"bad \\u escape: {hexpart!r}") from exc
            i += 6
        else:
            raise LexError(offset + 1 + i, f"unknown escape \\{e}")
    return "".join(out)


def _quote(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class StateRef:
    path: tuple[str, ...]  # first segment is the store key


@dataclass(frozen=True)
class Unary:
    op: str  # "not" | "neg"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # and or == != < <= > >= + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str  # "has" | "len"
    args: tuple["Expr", ...]


Expr = Union[Literal, StateRef, Unary, Binary, Call]

_CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.toks[self.pos]

    def advance(self) -> Token:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, lexeme: str | None = None) -> Token:
        tok = self.peek()
        if tok.kind != kind or (lexeme is not None and tok.lexeme != lexeme):
            want = lexeme or kind
            raise ParseError(tok.offset, f"expected {want}, found {tok.lexeme or 'end of input'!r}")
        return self.advance()

    def parse(self) -> Expr:
        e = self.or_expr()
        tok = self.peek()
        if tok.kind != "eof":
            raise ParseError(tok.offset, f"unexpected trailing input {tok.lexeme!r}")
        return e

    def or_expr(self) -> Expr:
        e = self.and_expr()
        while self.peek().kind == "op" and self.peek().lexeme == "or":
            self.advance()
            e = Binary("or", e, self.and_expr())
        return e

    def and_expr(self) -> Expr:
        e = self.not_expr()
        while self.peek().kind == "op" and self.peek().lexeme == "and":
            self.advance()
            e = Binary("and", e, self.not_expr())
        return e

    def not_expr(self) -> Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.lexeme == "not":
            self.advance()
            return Unary("not", self.not_expr())
        return self.comparison()

    def comparison(self) -> Expr:
        e = self.additive()
        tok = self.peek()
        if tok.kind == "op" and tok.lexeme in _CMP_OPS:
            self.advance()
            right = self.additive()
            after = self.peek()
            if after.kind == "op" and after.lexeme in _CMP_OPS:
                # non-associative by decree: a < b < c must be parenthesized
                raise ParseError(after.offset, "comparisons are non-associative")
            return Binary(tok.lexeme, e, right)
        return e

    def additive(self) -> Expr:
        e = self.multiplicative()
        while self.peek().kind == "op" and self.peek().lexeme in ("+", "-"):
            op = self.advance().lexeme
            e = Binary(op, e, self.multiplicative())
        return e

    def multiplicative(self) -> Expr:
        e = self.unary()
        while self.peek().kind == "op" and self.peek().lexeme in ("*", "/"):
            op = self.advance().lexeme
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.lexeme == "-":
            self.advance()
            return Unary("neg", self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return Literal(Value.of_int(int(tok.lexeme)))
        if tok.kind == "float":
            self.advance()
            return Literal(Value.of_float(float(tok.lexeme)))
        if tok.kind == "bool":
            self.advance()
            return Literal(Value.of_bool(tok.lexeme == "true"))
        if tok.kind == "string":
            self.advance()
            return Literal(Value.of_string(_unquote(tok.lexeme, tok.offset)))
        if tok.kind == "lparen":
            self.advance()
            e = self.or_expr()
            self.expect("rparen")
            return e
        if tok.kind == "ident":
            if tok.lexeme in ("has", "len") and self.toks[self.pos + 1].kind == "lparen":
                self.advance()
                self.advance()
                if tok.lexeme == "has":
                    arg = StateRef(self.path())
                else:
                    arg = self.or_expr()
                self.expect("rparen")
                return Call(tok.lexeme, (arg,))
            return StateRef(self.path())
        raise ParseError(tok.offset, f"expected expression, found {tok.lexeme or 'end of input'!r}")

    def path(self) -> tuple[str, ...]:
        first = self.expect("ident")
        parts = [first.lexeme]
        while self.peek().kind == "dot":
            self.advance()
            parts.append(self.expect("ident").lexeme)
        return tuple(parts)


def parse(tokens: list[Token]) -> Expr:
    return _Parser(tokens).parse()


def parse_source(source: str) -> Expr:
    return parse(tokenize(source))


# --- printer ------------------------------------------------------------------

# binding strength; children printed with parens when looser than required
_LEVEL = {"or": 1, "and": 2, "==": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4, "+": 5, "-": 5, "*": 6, "/": 6}


def _level_of(e: Expr) -> int:
    if isinstance(e, Binary):
        return _LEVEL[e.op]
    if isinstance(e, Unary):
        return 3 if e.op == "not" else 7
    return 8


def print_expr(e: Expr) -> str:
    """Canonical rendering: parse(tokenize(print_expr(e))) is structurally
    equal to e for any parser-produced AST."""
    if isinstance(e, Literal):
        v = e.value
        if v.tag == "bool":
            return "true" if v.payload else "false"
        if v.tag == "int":
            return str(v.payload)
        if v.tag == "float":
            return format_float(v.payload)  # type: ignore[arg-type]
        if v.tag == "string":
            return _quote(v.payload)  # type: ignore[arg-type]
        raise PredicateTypeError(f"unprintable literal tag {v.tag}")
    if isinstance(e, StateRef):
        return ".".join(e.path)
    if isinstance(e, Call):
        return f"{e.fn}({print_expr(e.args[0])})"
    if isinstance(e, Unary):
        if e.op == "not":
            inner = print_expr(e.operand)
            if _level_of(e.operand) < 3:
                inner = f"({inner})"
            return f"not {inner}"
        inner = print_expr(e.operand)
        if _level_of(e.operand) < 7:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Binary):
        lvl = _LEVEL[e.op]
        left = print_expr(e.left)
        right = print_expr(e.right)
        # left child may share the level (left-assoc chains); right must bind tighter.
        # comparisons are non-associative, so both sides must bind tighter.
        lmin = lvl + 1 if lvl == 4 else lvl
        if _level_of(e.left) < lmin:
            left = f"({left})"
        if _level_of(e.right) < lvl + 1:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    raise PredicateTypeError(f"unknown expression node {e!r}")


# --- typechecker ----------------------------------------------------------------


@dataclass(frozen=True)
class TypedExpr:
    expr: Expr
    result_type: FieldType


def _describe(t: FieldType) -> str:
    return repr(t)


def _ref_type(ref: StateRef, state_schema: Schema) -> FieldType:
    head = ref.path[0]
    t = state_schema.get(head)
    if t is None:
        raise UnknownStateKey(head)
    for seg in ref.path[1:]:
        if not isinstance(t, RecordOf):
            raise PredicateTypeError(
                f"cannot navigate '.{seg}' in {'.'.join(ref.path)}: {_describe(t)} is not a record"
            )
        nxt = t.schema.get(seg)
        if nxt is None:
            raise PredicateTypeError(f"record has no field {seg!r} in {'.'.join(ref.path)}")
        t = nxt
    return t


def _check(e: Expr, state_schema: Schema) -> FieldType:
    if isinstance(e, Literal):
        return Primitive(e.value.tag)
    if isinstance(e, StateRef):
        return _ref_type(e, state_schema)
    if isinstance(e, Call):
        if e.fn == "has":
            return BOOL
        t = _check(e.args[0], state_schema)
        if t == STRING or isinstance(t, ListOf):
            return INT
        raise PredicateTypeError(f"len() needs string or list, got {_describe(t)}", "string|list", _describe(t))
    if isinstance(e, Unary):
        t = _check(e.operand, state_schema)
        if e.op == "not":
            if t != BOOL:
                raise PredicateTypeError(f"'not' needs bool, got {_describe(t)}", "bool", _describe(t))
            return BOOL
        if t not in (INT, FLOAT):
            raise PredicateTypeError(f"unary '-' needs int or float, got {_describe(t)}", "int|float", _describe(t))
        return t
    if isinstance(e, Binary):
        lt = _check(e.left, state_schema)
        rt = _check(e.right, state_schema)
        op = e.op
        if op in ("and", "or"):
            for side, t in (("left", lt), ("right", rt)):
                if t != BOOL:
                    raise PredicateTypeError(f"'{op}' needs bool operands, {side} is {_describe(t)}", "bool", _describe(t))
            return BOOL
        if op in _CMP_OPS:
            if lt != rt:
                raise PredicateTypeError(
                    f"'{op}' needs matching operand types, got {_describe(lt)} and {_describe(rt)}",
                    _describe(lt),
                    _describe(rt),
                )
            allowed = (INT, FLOAT, STRING) if op not in ("==", "!=") else (INT, FLOAT, STRING, BOOL)
            if lt not in allowed:
                raise PredicateTypeError(f"'{op}' not defined for {_describe(lt)}")
            return BOOL
        # arithmetic: matching numeric types only, no implicit mixing
        if lt != rt or lt not in (INT, FLOAT):
            raise PredicateTypeError(
                f"'{op}' needs two ints or two floats, got {_describe(lt)} and {_describe(rt)}",
                "int|float",
                f"{_describe(lt)},{_describe(rt)}",
            )
        return lt
    raise PredicateTypeError(f"unknown expression node {e!r}")


def typecheck(e: Expr, state_schema: Schema) -> TypedExpr:
    return TypedExpr(e, _check(e, state_schema))


def compile_guard(source: str, state_schema: Schema) -> TypedExpr:
    """Parse + typecheck a guard; the result type must be bool."""
    te = typecheck(parse_source(source), state_schema)
    if te.result_type != BOOL:
        raise PredicateTypeError(f"guard must be bool, got {_describe(te.result_type)}", "bool")
    return te


# --- evaluator -------------------------------------------------------------------


def _read_path(path: tuple[str, ...], snapshot) -> Value:
    try:
        v = snapshot.read(path[0])  # ScopeViolation propagates untouched
    except MissingKey as exc:
        raise EvalError("missing-key", path[0]) from exc
    for seg in path[1:]:
        if v.tag != "record" or not v.has_field(seg):
            raise EvalError("missing-key", ".".join(path))
        v = v.field(seg)
    return v


def _resolve_has(path: tuple[str, ...], snapshot) -> bool:
    if path[0] not in snapshot.scope:
        # reading outside scope is a violation even through has()
        raise ScopeViolation(path[0])
    if path[0] not in snapshot.keys():
        return False
    v = snapshot.value(path[0])
    for seg in path[1:]:
        if v.tag != "record" or not v.has_field(seg):
            return False
        v = v.field(seg)
    return True


def _int_result(i: int) -> Value:
    if not (INT64_MIN <= i <= INT64_MAX):
        raise EvalError("int-overflow", str(i))
    return Value.of_int(i)


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def _ieee_div(a: float, b: float) -> float:
    if b == 0.0:
        if a == 0.0 or math.isnan(a):
            return math.nan
        sign = math.copysign(1.0, a) * math.copysign(1.0, b)
        return math.inf * sign
    return a / b


def evaluate(te: TypedExpr | Expr, snapshot) -> Value:
    """Evaluate a typechecked expression against a state snapshot.

    Strict except for and/or short-circuit. Raises EvalError for
    division-by-zero, nan-comparison, missing-key, int-overflow; scope
    violations propagate from the snapshot."""
    e = te.expr if isinstance(te, TypedExpr) else te
    return _eval(e, snapshot)


def _eval(e: Expr, snapshot) -> Value:
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, StateRef):
        return _read_path(e.path, snapshot)
    if isinstance(e, Call):
        if e.fn == "has":
            assert isinstance(e.args[0], StateRef)
            return Value.of_bool(_resolve_has(e.args[0].path, snapshot))
        v = _eval(e.args[0], snapshot)
        if v.tag == "string":
            return Value.of_int(len(v.payload))  # type: ignore[arg-type]
        if v.tag == "list":
            return Value.of_int(len(v.payload))  # type: ignore[arg-type]
        raise EvalError("missing-key", f"len() on {v.tag}")
    if isinstance(e, Unary):
        v = _eval(e.operand, snapshot)
        if e.op == "not":
            return Value.of_bool(not v.payload)
        if v.tag == "int":
            return _int_result(-v.payload)  # type: ignore[operator]
        return Value.of_float(-v.payload)  # type: ignore[operator]
    if isinstance(e, Binary):
        op = e.op
        if op == "and":
            left = _eval(e.left, snapshot)
            if not left.payload:
                return Value.of_bool(False)
            return Value.of_bool(bool(_eval(e.right, snapshot).payload))
        if op == "or":
            left = _eval(e.left, snapshot)
            if left.payload:
                return Value.of_bool(True)
            return Value.of_bool(bool(_eval(e.right, snapshot).payload))
        lv = _eval(e.left, snapshot)
        rv = _eval(e.right, snapshot)
        if op in _CMP_OPS:
            if lv.tag == "float" and (math.isnan(lv.payload) or math.isnan(rv.payload)):  # type: ignore[arg-type]
                raise EvalError("nan-comparison", print_expr(e))
            a, b = lv.payload, rv.payload
            result = {
                "==": a == b,
                "!=": a != b,
                "<": a < b,
                "<=": a <= b,
                ">": a > b,
                ">=": a >= b,
            }[op]
            return Value.of_bool(result)
        a, b = lv.payload, rv.payload
        if lv.tag == "int":
            if op == "+":
                return _int_result(a + b)  # type: ignore[operator]
            if op == "-":
                return _int_result(a - b)  # type: ignore[operator]
            if op == "*":
                return _int_result(a * b)  # type: ignore[operator]
            if b == 0:
                raise EvalError("division-by-zero", print_expr(e))
            return _int_result(_trunc_div(a, b))  # type: ignore[arg-type]
        if op == "+":
            return Value.of_float(a + b)  # type: ignore[operator]
        if op == "-":
            return Value.of_float(a - b)  # type: ignore[operator]
        if op == "*":
            return Value.of_float(a * b)  # type: ignore[operator]
        return Value.of_float(_ieee_div(a, b))  # type: ignore[arg-type]
    raise EvalError("missing-key", f"unknown node {e!r}")


# --- scope helper ------------------------------------------------------------------


def state_keys(e: Expr) -> frozenset[str]:
    """Top-level store keys an expression reads (including has() probes)."""
    out: set[str] = set()

    def walk(x: Expr) -> None:
        if isinstance(x, StateRef):
            out.add(x.path[0])
        elif isinstance(x, Unary):
            walk(x.operand)
        elif isinstance(x, Binary):
            walk(x.left)
            walk(x.right)
        elif isinstance(x, Call):
            for a in x.args:
                walk(a)

    walk(e)
    return frozenset(out)
