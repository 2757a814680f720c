"""A small boolean rule language over dataset metrics.

Grammar (keywords are case-insensitive, whitespace is insignificant)::

    expr       := and_expr ("or" and_expr)*
    and_expr   := unary ("and" unary)*
    unary      := "not" unary | "(" expr ")" | comparison
    comparison := metric OP number          OP in > >= < <= == !=
    metric     := latest(field) | mean(field, n) | pct_change(field, n)
                | count() | sum(field) | min(field) | max(field) | abs(metric)

Rules are evaluated against a sequence of periods, oldest first, each a
list of records. ``latest``, ``count``, ``sum``, ``min`` and ``max`` look
at the last period; ``mean`` and ``pct_change`` compare against the ``n``
periods before it. The field name ``count`` means "number of records".
"""

from __future__ import annotations

import json
import operator
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Iterable, Sequence, Union

from .errors import InsufficientData, RuleEvalError, RuleSyntaxError, UnknownField, ZeroBaseline
from .ingest import Record, RecordSet
from .jsonutil import format_decimal
from .stats import window_pct_change

COUNT_FIELD = "count"
KEYWORDS = {"and", "or", "not"}

OPERATORS = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
}

# metric name -> argument kinds
SIGNATURES = {
    "latest": ("field",),
    "mean": ("field", "window"),
    "pct_change": ("field", "window"),
    "count": (),
    "sum": ("field",),
    "min": ("field",),
    "max": ("field",),
    "abs": ("metric",),
}


class UnknownMetric(RuleSyntaxError):
    pass


class ArityError(RuleSyntaxError):
    pass


# -- AST ---------------------------------------------------------------------

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")


def _print_field(name: str) -> str:
    if _IDENT.fullmatch(name) and name.lower() not in KEYWORDS:
        return name
    return json.dumps(name)


@dataclass(frozen=True)
class Metric:
    name: str
    field: str | None = None
    window: int | None = None
    inner: Metric | None = None

    def __str__(self) -> str:
        if self.name == "count":
            return "count()"
        if self.name == "abs":
            return f"abs({self.inner})"
        if self.window is not None:
            return f"{self.name}({_print_field(self.field)}, {self.window})"
        return f"{self.name}({_print_field(self.field)})"


@dataclass(frozen=True)
class Comparison:
    metric: Metric
    op: str
    value: Decimal

    def __str__(self) -> str:
        return f"({self.metric} {self.op} {format_decimal(self.value)})"


@dataclass(frozen=True)
class Not:
    operand: Node

    def __str__(self) -> str:
        return f"(not {self.operand})"


@dataclass(frozen=True)
class And:
    left: Node
    right: Node

    def __str__(self) -> str:
        return f"({self.left} and {self.right})"


@dataclass(frozen=True)
class Or:
    left: Node
    right: Node

    def __str__(self) -> str:
        return f"({self.left} or {self.right})"


Node = Union[Comparison, Not, And, Or]


def print_rule(ast: Node) -> str:
    """Fully parenthesized text that parses back to the same tree."""
    return str(ast)


# -- tokenizer ---------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # ident, number, string, op, lparen, rparen, comma, eof
    text: str
    pos: int


_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<op>>=|<=|==|!=|>|<)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
""", re.VERBOSE)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


# -- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, expected: str):
        tok = self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise RuleSyntaxError(f"expected {expected}, found {found}", tok.pos)

    def expect(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            self.fail(what)
        return self.advance()

    def keyword(self, word: str) -> bool:
        return self.tok.kind == "ident" and self.tok.text.lower() == word

    def parse(self) -> Node:
        node = self.or_expr()
        if self.tok.kind != "eof":
            self.fail("'and', 'or' or end of input")
        return node

    def or_expr(self) -> Node:
        node = self.and_expr()
        while self.keyword("or"):
            self.advance()
            node = Or(node, self.and_expr())
        return node

    def and_expr(self) -> Node:
        node = self.unary()
        while self.keyword("and"):
            self.advance()
            node = And(node, self.unary())
        return node

    def unary(self) -> Node:
        if self.keyword("not"):
            self.advance()
            return Not(self.unary())
        if self.tok.kind == "lparen":
            self.advance()
            node = self.or_expr()
            self.expect("rparen", "')'")
            return node
        return self.comparison()

    def comparison(self) -> Comparison:
        metric = self.metric()
        if self.tok.kind != "op":
            self.fail("comparison operator")
        op = self.advance().text
        tok = self.expect("number", "number")
        try:
            value = Decimal(tok.text)
        except InvalidOperation:
            raise RuleSyntaxError(f"bad number {tok.text!r}", tok.pos) from None
        return Comparison(metric, op, value)

    def metric(self) -> Metric:
        tok = self.tok
        if tok.kind != "ident" or tok.text.lower() in KEYWORDS:
            self.fail("metric")
        self.advance()
        name = tok.text
        if name not in SIGNATURES:
            raise UnknownMetric(f"unknown metric {name!r}", tok.pos)
        self.expect("lparen", f"'(' after {name}")
        args: list = []
        kinds = SIGNATURES[name]
        while self.tok.kind != "rparen":
            if args:
                self.expect("comma", "',' or ')'")
            if len(args) >= len(kinds):
                raise ArityError(f"{name} takes {len(kinds)} argument(s)", self.tok.pos)
            args.append(self.argument(kinds[len(args)]))
        if len(args) != len(kinds):
            raise ArityError(f"{name} takes {len(kinds)} argument(s), got {len(args)}", self.tok.pos)
        self.advance()
        if name == "abs":
            return Metric(name, inner=args[0])
        if name == "count":
            return Metric(name)
        return Metric(name, field=args[0], window=args[1] if len(args) > 1 else None)

    def argument(self, kind: str):
        tok = self.tok
        if kind == "metric":
            return self.metric()
        if kind == "window":
            if tok.kind != "number" or not re.fullmatch(r"\d+", tok.text) or int(tok.text) < 1:
                self.fail("positive integer window")
            self.advance()
            return int(tok.text)
        if tok.kind == "ident":
            self.advance()
            return tok.text
        if tok.kind == "string":
            self.advance()
            return json.loads(tok.text)
        self.fail("field name")


def parse_rule(text: str) -> Node:
    return _Parser(text).parse()


# -- evaluation --------------------------------------------------------------

@dataclass
class RuleResult:
    fired: bool
    bindings: dict[str, Decimal] = field(default_factory=dict)


Periods = Sequence[Sequence[Record]]


def _as_periods(data: RecordSet | Periods) -> list[list[Record]]:
    if isinstance(data, RecordSet):
        return [list(data.records)]
    return [list(p.records) if isinstance(p, RecordSet) else list(p) for p in data]


def _number(value, field_name: str) -> Decimal:
    if isinstance(value, bool) or value is None:
        raise RuleEvalError(f"field {field_name!r} has non-numeric value {value!r}")
    try:
        return Decimal(str(value).strip()) if isinstance(value, str) else Decimal(value)
    except InvalidOperation:
        raise RuleEvalError(f"field {field_name!r} has non-numeric value {value!r}") from None


class _Evaluator:
    def __init__(self, periods: list[list[Record]]):
        if not periods:
            raise InsufficientData("no periods to evaluate")
        self.periods = periods
        self.bindings: dict[str, Decimal] = {}

    def _check_field(self, name: str) -> None:
        if name == COUNT_FIELD:
            return
        if not any(name in r for p in self.periods for r in p):
            raise UnknownField(f"unknown field {name!r}")

    def period_value(self, records: list[Record], name: str) -> Decimal:
        if name == COUNT_FIELD:
            return Decimal(len(records))
        return sum((_number(r[name], name) for r in records if name in r), Decimal(0))

    def window(self, name: str, n: int) -> tuple[list[Decimal], Decimal]:
        if len(self.periods) < n + 1:
            raise InsufficientData(
                f"window of {n} needs {n + 1} periods, have {len(self.periods)}")
        values = [self.period_value(p, name) for p in self.periods[-n - 1:]]
        return values[:-1], values[-1]

    def latest_values(self, name: str) -> list[Decimal]:
        return [_number(r[name], name) for r in self.periods[-1] if name in r]

    def metric(self, m: Metric) -> Decimal:
        if m.name == "abs":
            value = abs(self.metric(m.inner))
        elif m.name == "count":
            value = Decimal(len(self.periods[-1]))
        else:
            self._check_field(m.field)
            if m.name == "latest":
                value = self.period_value(self.periods[-1], m.field)
            elif m.name == "mean":
                window, _ = self.window(m.field, m.window)
                value = sum(window, Decimal(0)) / len(window)
            elif m.name == "pct_change":
                window, latest = self.window(m.field, m.window)
                try:
                    value = window_pct_change(latest, window)
                except ZeroBaseline:
                    value = Decimal("Infinity") if latest > 0 else Decimal(0)
            elif m.name == "sum":
                value = self.period_value(self.periods[-1], m.field)
            else:
                values = self.latest_values(m.field)
                if not values:
                    raise InsufficientData(f"no values of {m.field!r} in the latest period")
                value = min(values) if m.name == "min" else max(values)
        self.bindings[str(m)] = value
        return value

    def node(self, n: Node) -> bool:
        if isinstance(n, Comparison):
            return OPERATORS[n.op](self.metric(n.metric), n.value)
        if isinstance(n, Not):
            return not self.node(n.operand)
        # both sides always evaluated so errors and bindings do not depend on order
        left, right = self.node(n.left), self.node(n.right)
        return (left and right) if isinstance(n, And) else (left or right)


def eval_rule(ast: Node | str, data: RecordSet | Periods) -> RuleResult:
    if isinstance(ast, str):
        ast = parse_rule(ast)
    ev = _Evaluator(_as_periods(data))
    fired = ev.node(ast)
    return RuleResult(fired=fired, bindings=ev.bindings)


def metrics_in(ast: Node) -> Iterable[Metric]:
    if isinstance(ast, Comparison):
        m = ast.metric
        while m is not None:
            yield m
            m = m.inner
    elif isinstance(ast, Not):
        yield from metrics_in(ast.operand)
    else:
        yield from metrics_in(ast.left)
        yield from metrics_in(ast.right)


def max_window(ast: Node) -> int:
    """Largest baseline window referenced by the rule (0 if none)."""
    return max((m.window or 0 for m in metrics_in(ast)), default=0)
