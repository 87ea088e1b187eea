"""The behavior DSL: a small, pure expression language standing in for packaged models.

    program := (let IDENT = expr ;)* return expr [;]
    expr    := literal | IDENT | BUILTIN ( expr {, expr} )
    literal := decimal | [d, d, ...] | "label" | ["a", "b", ...]

``#`` starts a comment that runs to the end of the line.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

from stratum.errors import (
    ArityError,
    DivByZero,
    EmptyVector,
    IndexOutOfRange,
    InvalidArgument,
    NonFiniteResult,
    ParseError,
    TypeCheckError,
    UnboundIdentifier,
    UnknownBuiltin,
)
from stratum.model.types import Port
from stratum.model.values import Label, Scalar, Value, ValueType, Vector

LABEL_LIST = "LabelList"
SC, VE, LA = ValueType.SCALAR, ValueType.VECTOR, ValueType.LABEL

# name -> (argument types, result type)
BUILTINS: dict[str, tuple[tuple, ValueType]] = {
    "add": ((SC, SC), SC),
    "sub": ((SC, SC), SC),
    "mul": ((SC, SC), SC),
    "div": ((SC, SC), SC),
    "dot": ((VE, VE), SC),
    "sum": ((VE,), SC),
    "mean": ((VE,), SC),
    "min": ((VE,), SC),
    "max": ((VE,), SC),
    "clamp": ((SC, SC, SC), SC),
    "scale": ((VE, SC), VE),
    "concat": ((VE, VE), VE),
    "slice": ((VE, SC, SC), VE),
    "argmax": ((VE,), SC),
    "threshold": ((SC, SC), SC),
    "select": ((LABEL_LIST, SC), LA),
}

MAX_DEPTH = 128


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class LabelList:
    labels: tuple[str, ...]


@dataclass(frozen=True)
class Ident:
    name: str


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Expression", ...]


Expression = Union[Literal, LabelList, Ident, Call]


@dataclass(frozen=True)
class BehaviorProgram:
    declarations: tuple[tuple[str, Expression], ...]
    result: Expression

    @property
    def referenced_inputs(self) -> frozenset[str]:
        declared = {name for name, _ in self.declarations}
        names: set[str] = set()
        for _, e in self.declarations:
            names |= _identifiers(e)
        names |= _identifiers(self.result)
        return frozenset(names - declared)


def _identifiers(e: Expression) -> set[str]:
    if isinstance(e, Ident):
        return {e.name}
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= _identifiers(a)
        return out
    return set()


# -- lexer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<num>-?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<str>"[^"\n]*")
  | (?P<punct>[()\[\],;=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        if kind != "ws":
            toks.append(_Tok(kind, text, line, pos - line_start + 1))
        nl = text.count("\n")
        if nl:
            line += nl
            line_start = pos + text.rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


# -- parser --------------------------------------------------------------


class _Parser:
    def __init__(self, toks: list[_Tok]) -> None:
        self.toks = toks
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.next()
        if t.text != text or t.kind == "str":
            raise ParseError(f"expected {text!r}, found {t.text or 'end of input'!r}", t.line, t.col)
        return t

    def program(self) -> BehaviorProgram:
        decls: list[tuple[str, Expression]] = []
        declared: set[str] = set()
        name_toks: list[_Tok] = []
        while self.peek().kind == "ident" and self.peek().text == "let":
            self.next()
            name_tok = self.next()
            if name_tok.kind != "ident" or name_tok.text in ("let", "return") or name_tok.text in BUILTINS:
                raise ParseError(f"bad declaration name {name_tok.text!r}", name_tok.line, name_tok.col)
            if name_tok.text in declared:
                raise ParseError(f"{name_tok.text!r} declared twice", name_tok.line, name_tok.col)
            self.expect("=")
            expr = self.expr(0)
            self.expect(";")
            decls.append((name_tok.text, expr))
            declared.add(name_tok.text)
            name_toks.append(name_tok)
        t = self.next()
        if t.kind != "ident" or t.text != "return":
            raise ParseError(f"expected 'let' or 'return', found {t.text or 'end of input'!r}", t.line, t.col)
        result = self.expr(0)
        if self.peek().text == ";" and self.peek().kind == "punct":
            self.next()
        t = self.peek()
        if t.kind != "eof":
            raise ParseError(f"unexpected {t.text!r} after return expression", t.line, t.col)
        names = [n for n, _ in decls]
        for idx, (name, expr) in enumerate(decls):
            bad = _identifiers(expr) & set(names[idx:])
            if bad:
                tok = name_toks[idx]
                raise ParseError(
                    f"declaration {name!r} references {sorted(bad)[0]!r} before it is defined", tok.line, tok.col
                )
        return BehaviorProgram(tuple(decls), result)

    def expr(self, depth: int) -> Expression:
        t = self.next()
        if depth > MAX_DEPTH:
            raise ParseError("expression nested too deeply", t.line, t.col)
        if t.kind == "num":
            return Literal(Scalar(self._decimal(t)))
        if t.kind == "str":
            return Literal(Label(t.text[1:-1]))
        if t.kind == "punct" and t.text == "[":
            return self._list(t)
        if t.kind == "ident":
            if t.text in ("let", "return"):
                raise ParseError(f"keyword {t.text!r} used as an expression", t.line, t.col)
            if self.peek().text == "(" and self.peek().kind == "punct":
                return self._call(t, depth)
            return Ident(t.text)
        raise ParseError(f"unexpected {t.text or 'end of input'!r}", t.line, t.col)

    def _call(self, name_tok: _Tok, depth: int) -> Call:
        if name_tok.text not in BUILTINS:
            raise UnknownBuiltin(f"unknown builtin {name_tok.text!r}", name_tok.line, name_tok.col)
        self.expect("(")
        args = [self.expr(depth + 1)]
        while self.peek().text == "," and self.peek().kind == "punct":
            self.next()
            args.append(self.expr(depth + 1))
        self.expect(")")
        arity = len(BUILTINS[name_tok.text][0])
        if len(args) != arity:
            raise ArityError(
                f"{name_tok.text} takes {arity} argument(s), got {len(args)}", name_tok.line, name_tok.col
            )
        return Call(name_tok.text, tuple(args))

    def _list(self, open_tok: _Tok) -> Expression:
        if self.peek().text == "]" and self.peek().kind == "punct":
            self.next()
            return Literal(Vector(()))
        items = [self.next()]
        while self.peek().text == "," and self.peek().kind == "punct":
            self.next()
            items.append(self.next())
        self.expect("]")
        if all(t.kind == "num" for t in items):
            return Literal(Vector(self._decimal(t) for t in items))
        if all(t.kind == "str" for t in items):
            return LabelList(tuple(t.text[1:-1] for t in items))
        bad = next(t for t in items if t.kind not in ("num", "str") or t.kind != items[0].kind)
        raise ParseError(f"list literal must hold only decimals or only labels, found {bad.text!r}", bad.line, bad.col)

    @staticmethod
    def _decimal(t: _Tok) -> float:
        x = float(t.text)
        if not math.isfinite(x):
            raise ParseError(f"decimal literal {t.text!r} is out of range", t.line, t.col)
        return x


def parse_behavior(source: bytes | str) -> BehaviorProgram:
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"source is not valid UTF-8: {exc.reason}", 1, exc.start + 1) from None
    return _Parser(_tokenize(source)).program()


# -- typechecking -------------------------------------------------------


@dataclass(frozen=True)
class PortTypes:
    inputs: dict[str, ValueType]
    declarations: dict[str, ValueType]
    result: ValueType


def _type_of(e: Expression, env: Mapping[str, ValueType]):
    if isinstance(e, Literal):
        return e.value.type
    if isinstance(e, LabelList):
        return LABEL_LIST
    if isinstance(e, Ident):
        if e.name not in env:
            raise UnboundIdentifier(f"unbound identifier {e.name!r}", e)
        return env[e.name]
    expected, result = BUILTINS[e.name]
    for idx, (arg, want) in enumerate(zip(e.args, expected)):
        if want == LABEL_LIST and not isinstance(arg, LabelList):
            raise TypeCheckError(f"{e.name}: argument {idx + 1} must be a label-list literal", e)
        got = _type_of(arg, env)
        if got != want:
            got_s = got if isinstance(got, str) and not isinstance(got, ValueType) else got.value
            want_s = want if want == LABEL_LIST else want.value
            raise TypeCheckError(f"{e.name}: argument {idx + 1} is {got_s}, expected {want_s}", e)
    return result


def typecheck(prog: BehaviorProgram, inputs: Iterable[Port], outputs: Iterable[Port] = ()) -> PortTypes:
    in_types = {p.name: p.type for p in inputs}
    env: dict[str, ValueType] = dict(in_types)
    decl_types = {}
    for name, expr in prog.declarations:
        t = _type_of(expr, env)
        if t == LABEL_LIST:
            raise TypeCheckError(f"label lists may only appear as select() arguments ({name!r})", expr)
        env[name] = t
        decl_types[name] = t
    result = _type_of(prog.result, env)
    if result == LABEL_LIST:
        raise TypeCheckError("program result cannot be a label list", prog.result)
    outputs = list(outputs)
    if outputs:
        if len(outputs) != 1:
            raise TypeCheckError(f"behavior programs produce one output, manifest declares {len(outputs)}")
        if outputs[0].type != result:
            raise TypeCheckError(
                f"result is {result.value} but output port {outputs[0].name!r} is {outputs[0].type.value}",
                prog.result,
            )
    return PortTypes(in_types, decl_types, result)


# -- evaluation ---------------------------------------------------------


def _finite(x: float) -> float:
    if not math.isfinite(x):
        raise NonFiniteResult(f"non-finite intermediate result {x!r}")
    return x


def _want(v, cls, fn: str):
    if not isinstance(v, cls):
        raise TypeCheckError(f"{fn}: expected {cls.__name__}, got {type(v).__name__}")
    return v


def _nonempty(v: Vector, fn: str) -> tuple[float, ...]:
    if not v.items:
        raise EmptyVector(f"{fn} of an empty vector")
    return v.items


def _sum(items: Iterable[float]) -> float:
    total = 0.0
    for x in items:
        total += x
    return total


def _index(x: float) -> int:
    return int(x)  # truncates toward zero


def _apply(name: str, args: list) -> Value:
    if name in ("add", "sub", "mul", "div", "threshold"):
        a = _want(args[0], Scalar, name).value
        b = _want(args[1], Scalar, name).value
        if name == "add":
            return Scalar(_finite(a + b))
        if name == "sub":
            return Scalar(_finite(a - b))
        if name == "mul":
            return Scalar(_finite(a * b))
        if name == "div":
            if b == 0:
                raise DivByZero(f"div({a!r}, {b!r})")
            return Scalar(_finite(a / b))
        return Scalar(1.0 if a >= b else 0.0)
    if name == "dot":
        a = _want(args[0], Vector, name).items
        b = _want(args[1], Vector, name).items
        if len(a) != len(b):
            raise IndexOutOfRange(f"dot of vectors with lengths {len(a)} and {len(b)}")
        return Scalar(_finite(_sum(x * y for x, y in zip(a, b))))
    if name == "sum":
        return Scalar(_finite(_sum(_want(args[0], Vector, name).items)))
    if name == "mean":
        items = _nonempty(_want(args[0], Vector, name), name)
        return Scalar(_finite(_sum(items) / len(items)))
    if name == "min":
        return Scalar(min(_nonempty(_want(args[0], Vector, name), name)))
    if name == "max":
        return Scalar(max(_nonempty(_want(args[0], Vector, name), name)))
    if name == "argmax":
        items = _nonempty(_want(args[0], Vector, name), name)
        best = 0
        for i, x in enumerate(items):
            if x > items[best]:
                best = i
        return Scalar(float(best))
    if name == "clamp":
        x, lo, hi = (_want(a, Scalar, name).value for a in args)
        if lo > hi:
            raise InvalidArgument(f"clamp bounds out of order: {lo!r} > {hi!r}")
        return Scalar(min(max(x, lo), hi))
    if name == "scale":
        v = _want(args[0], Vector, name).items
        s = _want(args[1], Scalar, name).value
        return Vector(_finite(x * s) for x in v)
    if name == "concat":
        return Vector(_want(args[0], Vector, name).items + _want(args[1], Vector, name).items)
    if name == "slice":
        v = _want(args[0], Vector, name).items
        i = _index(_want(args[1], Scalar, name).value)
        j = _index(_want(args[2], Scalar, name).value)
        if not 0 <= i <= j <= len(v):
            raise IndexOutOfRange(f"slice [{i}, {j}) of a vector with length {len(v)}")
        return Vector(v[i:j])
    if name == "select":
        labels = args[0]
        if not isinstance(labels, tuple):
            raise TypeCheckError("select: first argument must be a label-list literal")
        i = _index(_want(args[1], Scalar, name).value)
        if not 0 <= i < len(labels):
            raise IndexOutOfRange(f"select index {i} outside {len(labels)} labels")
        return Label(labels[i])
    raise TypeCheckError(f"unknown builtin {name!r}")


def _eval(e: Expression, env: Mapping[str, Value]):
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, LabelList):
        return e.labels
    if isinstance(e, Ident):
        if e.name not in env:
            raise UnboundIdentifier(f"unbound identifier {e.name!r}", e)
        return env[e.name]
    return _apply(e.name, [_eval(a, env) for a in e.args])


def _check_value(v: Value, where: str) -> None:
    if isinstance(v, Scalar):
        _finite(v.value)
    elif isinstance(v, Vector):
        for x in v.items:
            _finite(x)
    elif not isinstance(v, Label):
        raise TypeCheckError(f"{where}: not a value: {type(v).__name__}")


def evaluate(prog: BehaviorProgram, inputs: Mapping[str, Value], output: str = "result") -> dict[str, Value]:
    """Evaluate ``prog`` over ``inputs``; the result is bound to the ``output`` port name."""
    missing = prog.referenced_inputs - set(inputs)
    if missing:
        raise UnboundIdentifier(f"input port(s) not bound: {sorted(missing)}")
    env: dict[str, Value] = {}
    for name in prog.referenced_inputs:
        _check_value(inputs[name], f"input {name!r}")
        env[name] = inputs[name]
    for name, expr in prog.declarations:
        env[name] = _eval(expr, env)
    result = _eval(prog.result, env)
    _check_value(result, "result")
    return {output: result}
