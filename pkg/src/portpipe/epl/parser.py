"""Lexer and recursive-descent parser for the statement language.

Keywords are case-insensitive, identifiers are case-sensitive. Esper
constructs outside the supported subset are rejected with a
:class:`ParseError` that names the construct.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Optional

from ..events import FieldType
from .ast import (
    Aggregate,
    Annotation,
    BoolOp,
    Compare,
    CreateContext,
    CreateSchema,
    Dataflow,
    DataflowParams,
    Expr,
    FieldRef,
    Literal,
    Not,
    Pattern,
    PlainSource,
    Projection,
    Select,
    Statement,
    TimeWindowSource,
    Wildcard,
)
from .errors import ParseError

TIME_UNITS = {
    "s": 1,
    "sec": 1,
    "second": 1,
    "seconds": 1,
    "min": 60,
    "minute": 60,
    "minutes": 60,
    "hour": 3600,
    "hours": 3600,
}

RESERVED = frozenset(
    """select from where group by output insert into as and or not pattern every having order limit
    context create snapshot when terminated join on inner left right full outer unidirectional
    start end after""".split()
)

UNSUPPORTED_CLAUSES = {
    "where": "where clause",
    "having": "having clause",
    "order": "order by",
    "limit": "limit clause",
    "join": "join",
    "inner": "join",
    "left": "outer join",
    "right": "outer join",
    "full": "outer join",
    "unidirectional": "unidirectional join",
    "match_recognize": "match_recognize",
}

DATAFLOW_SOURCES = {"AMQPSource": "BrokerSource", "BrokerSource": "BrokerSource"}
DATAFLOW_PARAMS = {
    "host": str,
    "queueName": str,
    "collector": dict,
    "logMessages": bool,
    "declareAutoDelete": bool,
    "declareDurable": bool,
}


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT NUMBER STRING OP EOF
    value: Any
    line: int
    col: int

    def describe(self) -> str:
        if self.kind == "EOF":
            return "end of input"
        if self.kind == "STRING":
            return f"string {self.value!r}"
        return repr(str(self.value))


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<string>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
  | (?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<op>->|>=|<=|<>|!=|[=<>()\[\]{},.*;@#:+\-/])
    """,
    re.VERBOSE | re.DOTALL,
)
_KEYWORD_NUMBER = re.compile(r"(after)(\d+)", re.IGNORECASE)
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r"}


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", lambda m: _ESCAPES.get(m.group(1), m.group(1)), body, flags=re.DOTALL)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    line, line_start = 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            if text[pos] in "'\"":
                raise ParseError("unterminated string literal", line, col)
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        raw = m.group()
        if kind == "number":
            value = float(raw) if any(c in raw for c in ".eE") else int(raw)
            tokens.append(Token("NUMBER", value, line, col))
        elif kind == "string":
            tokens.append(Token("STRING", _unescape(raw[1:-1]), line, col))
        elif kind == "ident":
            km = _KEYWORD_NUMBER.fullmatch(raw)
            if km:
                # A keyword fused with its number, e.g. "after3600".
                tokens.append(Token("IDENT", km.group(1), line, col))
                tokens.append(Token("NUMBER", int(km.group(2)), line, col + len(km.group(1))))
            else:
                tokens.append(Token("IDENT", raw, line, col))
        elif kind == "op":
            tokens.append(Token("OP", raw, line, col))
        newlines = raw.count("\n")
        if newlines:
            line += newlines
            line_start = pos + raw.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("EOF", None, line, pos - line_start + 1))
    return tokens


class Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0
        self._allow_agg = False

    # token helpers ---------------------------------------------------------

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def error(self, message: str, expected=(), tok: Optional[Token] = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(message, tok.line, tok.col, expected)

    def at_kw(self, *words: str) -> bool:
        tok = self.tok
        return tok.kind == "IDENT" and tok.value.lower() in words

    def at_op(self, *ops: str) -> bool:
        return self.tok.kind == "OP" and self.tok.value in ops

    def accept_kw(self, word: str) -> bool:
        if self.at_kw(word):
            self.advance()
            return True
        return False

    def accept_op(self, op: str) -> bool:
        if self.at_op(op):
            self.advance()
            return True
        return False

    def expect_kw(self, *words: str) -> str:
        if self.at_kw(*words):
            return self.advance().value.lower()
        raise self.error(f"unexpected {self.tok.describe()}", words)

    def expect_op(self, op: str) -> Token:
        if self.at_op(op):
            return self.advance()
        raise self.error(f"unexpected {self.tok.describe()}", [op])

    def expect_ident(self, what: str = "identifier") -> str:
        tok = self.tok
        if tok.kind == "IDENT" and tok.value.lower() not in RESERVED:
            return self.advance().value
        raise self.error(f"unexpected {tok.describe()}", [what])

    def expect_string(self) -> str:
        if self.tok.kind == "STRING":
            return self.advance().value
        raise self.error(f"unexpected {self.tok.describe()}", ["string"])

    # statements ------------------------------------------------------------

    def parse(self) -> Statement:
        annotations = self.parse_annotations()
        if self.at_kw("create"):
            stmt = self.parse_create(annotations)
        elif self.at_kw("context", "insert", "select"):
            stmt = self.parse_select(annotations)
        else:
            self.reject_unsupported()
            raise self.error(f"unexpected {self.tok.describe()}", ["@", "create", "context", "insert", "select"])
        self.accept_op(";")
        if self.tok.kind != "EOF":
            self.reject_unsupported()
            raise self.error(f"unexpected {self.tok.describe()}", ["end of input"])
        return stmt

    def reject_unsupported(self) -> None:
        tok = self.tok
        if tok.kind == "IDENT":
            word = tok.value.lower()
            if word in UNSUPPORTED_CLAUSES:
                raise self.error(f"unsupported construct: {UNSUPPORTED_CLAUSES[word]}")
            if word in ("on", "update", "delete", "expression"):
                raise self.error(f"unsupported construct: {word!r} statement")

    def parse_annotations(self) -> tuple[Annotation, ...]:
        result: list[Annotation] = []
        tag_names: set[str] = set()
        while self.at_op("@"):
            at = self.advance()
            name_tok = self.tok
            name = self.expect_ident("annotation name")
            low = name.lower()
            if low in ("public", "buseventtype"):
                result.append(Annotation(low))
                continue
            if low == "name":
                self.expect_op("(")
                if self.tok.kind == "IDENT":
                    self.expect_kw("value")
                    self.expect_op("=")
                value = self.expect_string()
                self.expect_op(")")
                if any(a.kind == "Name" for a in result):
                    raise self.error("duplicate @Name annotation", tok=at)
                result.append(Annotation("Name", value=value))
                continue
            if low == "tag":
                self.expect_op("(")
                args = self.parse_annotation_args()
                self.expect_op(")")
                if set(args) != {"name", "value"}:
                    raise self.error("@Tag requires exactly name= and value=", tok=name_tok)
                if args["name"] in tag_names:
                    raise self.error(f"duplicate @Tag name {args['name']!r}", tok=at)
                tag_names.add(args["name"])
                result.append(Annotation("Tag", args["name"], args["value"]))
                continue
            raise self.error(f"unsupported construct: annotation @{name}", tok=name_tok)
        return tuple(result)

    def parse_annotation_args(self) -> dict[str, str]:
        args: dict[str, str] = {}
        while True:
            key_tok = self.tok
            key = self.expect_kw("name", "value")
            if key in args:
                raise self.error(f"duplicate annotation argument {key!r}", tok=key_tok)
            self.expect_op("=")
            args[key] = self.expect_string()
            if not self.accept_op(","):
                return args

    def parse_create(self, annotations) -> Statement:
        self.expect_kw("create")
        if self.at_kw("window", "variable", "index", "table", "expression"):
            raise self.error(f"unsupported construct: create {self.tok.value.lower()}")
        kind = self.expect_kw("schema", "context", "dataflow")
        if kind == "schema":
            return self.parse_schema(annotations)
        if kind == "context":
            return self.parse_context(annotations)
        return self.parse_dataflow(annotations)

    def parse_schema(self, annotations) -> CreateSchema:
        name = self.expect_ident("schema name")
        self.accept_kw("as")
        self.expect_op("(")
        fields: list[tuple[str, FieldType]] = []
        seen: set[str] = set()
        while True:
            field_tok = self.tok
            fname = self.expect_ident("field name")
            type_tok = self.tok
            tname = self.expect_ident("field type")
            try:
                ftype = FieldType.from_name(tname)
            except ValueError:
                raise self.error(f"unknown field type {tname!r}", ["Integer", "Double", "String", "Boolean"], tok=type_tok) from None
            if fname in seen:
                raise self.error(f"duplicate field {fname!r}", tok=field_tok)
            seen.add(fname)
            fields.append((fname, ftype))
            if not self.accept_op(","):
                break
        self.expect_op(")")
        return CreateSchema(name, tuple(fields), annotations)

    def parse_duration(self) -> float:
        tok = self.tok
        if tok.kind != "NUMBER":
            raise self.error(f"unexpected {tok.describe()}", ["number"])
        self.advance()
        if self.tok.kind == "IDENT":
            unit = self.tok.value.lower()
            if unit not in TIME_UNITS:
                raise self.error(f"unknown time unit {self.tok.value!r}", sorted(TIME_UNITS))
            self.advance()
            seconds = tok.value * TIME_UNITS[unit]
        else:
            seconds = tok.value
        if seconds <= 0:
            raise self.error("duration must be positive", tok=tok)
        return seconds

    def parse_context(self, annotations) -> CreateContext:
        name = self.expect_ident("context name")
        if self.at_kw("partition", "coalesce", "group", "initiated"):
            raise self.error(f"unsupported construct: {self.tok.value.lower()} context")
        self.expect_kw("start")
        self.expect_op("@")
        self.expect_kw("now")
        self.expect_kw("end")
        self.expect_kw("after")
        dur_tok = self.tok
        seconds = self.parse_duration()
        if seconds != int(seconds):
            raise self.error("context duration must be a whole number of seconds", tok=dur_tok)
        return CreateContext(name, int(seconds), annotations)

    def parse_dataflow(self, annotations) -> Dataflow:
        name = self.expect_ident("dataflow name")
        src_tok = self.tok
        source = self.expect_ident("source operator")
        if source not in DATAFLOW_SOURCES:
            raise self.error(f"unsupported dataflow source {source!r}", sorted(DATAFLOW_SOURCES), tok=src_tok)
        self.expect_op("->")
        stream = self.expect_ident("stream name")
        self.expect_op("<")
        schema = self.expect_ident("schema name")
        self.expect_op(">")
        params_tok = self.tok
        raw = self.parse_object()
        sink_tok = self.tok
        sink = self.expect_ident("sink operator")
        if sink != "EventBusSink":
            raise self.error(f"unsupported dataflow sink {sink!r}", ["EventBusSink"], tok=sink_tok)
        self.expect_op("(")
        sink_stream_tok = self.tok
        sink_stream = self.expect_ident("stream name")
        if sink_stream != stream:
            raise self.error(f"sink reads {sink_stream!r} but the source emits {stream!r}", tok=sink_stream_tok)
        self.expect_op(")")
        if self.at_op("{"):
            sink_params = self.parse_object()
            if sink_params:
                raise self.error("EventBusSink takes no parameters", tok=sink_tok)
        return Dataflow(
            name,
            DATAFLOW_SOURCES[source],
            stream,
            schema,
            self.validate_params(raw, params_tok),
            sink,
            annotations,
        )

    def validate_params(self, raw: dict, tok: Token) -> DataflowParams:
        for key, value in raw.items():
            expected = DATAFLOW_PARAMS.get(key)
            if expected is None:
                raise self.error(f"unknown dataflow parameter {key!r}", sorted(DATAFLOW_PARAMS), tok=tok)
            if not isinstance(value, expected) or (expected is not bool and isinstance(value, bool)):
                raise self.error(f"dataflow parameter {key!r} must be a {expected.__name__}", tok=tok)
        for key in ("host", "queueName"):
            if key not in raw:
                raise self.error(f"dataflow parameter {key!r} is required", tok=tok)
        collector = raw.get("collector")
        if collector is not None and (set(collector) != {"class"} or not isinstance(collector["class"], str)):
            raise self.error("collector must be {class: '<name>'}", tok=tok)
        return DataflowParams(
            host=raw["host"],
            queue_name=raw["queueName"],
            collector=collector["class"] if collector else None,
            log_messages=raw.get("logMessages", False),
            declare_auto_delete=raw.get("declareAutoDelete", False),
            declare_durable=raw.get("declareDurable", False),
        )

    def parse_object(self) -> dict:
        self.expect_op("{")
        result: dict[str, Any] = {}
        if self.accept_op("}"):
            return result
        while True:
            key_tok = self.tok
            key = self.expect_ident("parameter name")
            if key in result:
                raise self.error(f"duplicate parameter {key!r}", tok=key_tok)
            self.expect_op(":")
            result[key] = self.parse_value()
            if not self.accept_op(","):
                break
        self.expect_op("}")
        return result

    def parse_value(self) -> Any:
        tok = self.tok
        if tok.kind in ("STRING", "NUMBER"):
            return self.advance().value
        if self.at_kw("true", "false"):
            return self.advance().value.lower() == "true"
        if self.at_op("{"):
            return self.parse_object()
        raise self.error(f"unexpected {tok.describe()}", ["string", "number", "true", "false", "{"])

    # select / pattern --------------------------------------------------------

    def parse_select(self, annotations) -> Statement:
        context = None
        insert_into = None
        if self.accept_kw("context"):
            context = self.expect_ident("context name")
        if self.accept_kw("insert"):
            self.expect_kw("into")
            insert_into = self.expect_ident("stream name")
        self.expect_kw("select")
        if self.at_kw("distinct", "irstream", "rstream", "istream"):
            raise self.error(f"unsupported construct: select {self.tok.value.lower()}")
        projections = self.parse_projections()
        self.expect_kw("from")
        if self.accept_kw("pattern"):
            if context is not None:
                raise self.error("unsupported construct: context-bound pattern")
            binding, stream, filt = self.parse_pattern_expr()
            if any(_has_aggregate(p.expr) for p in projections):
                raise self.error("aggregates are not supported in pattern statements")
            if self.at_kw("group", "output"):
                raise self.error(f"unsupported construct: {self.tok.value.lower()} on a pattern")
            self.reject_unsupported()
            return Pattern(projections, binding, stream, filt, annotations, insert_into)

        source = self.parse_source()
        if isinstance(source, TimeWindowSource) and context is not None:
            raise self.error("unsupported construct: time window inside a context")
        self.reject_unsupported()
        group_by: tuple[FieldRef, ...] = ()
        if self.accept_kw("group"):
            self.expect_kw("by")
            refs = [self.parse_field_ref()]
            while self.accept_op(","):
                refs.append(self.parse_field_ref())
            group_by = tuple(refs)
        snapshot = False
        if self.at_kw("output"):
            out_tok = self.advance()
            if not self.at_kw("snapshot"):
                raise self.error("unsupported construct: output rate limiting other than snapshot when terminated", ["snapshot"])
            self.advance()
            self.expect_kw("when")
            self.expect_kw("terminated")
            if context is None:
                raise self.error("output snapshot when terminated requires a context", tok=out_tok)
            snapshot = True
        self.reject_unsupported()
        return Select(projections, source, annotations, context, insert_into, group_by, snapshot)

    def parse_projections(self) -> tuple[Projection, ...]:
        if self.accept_op("*"):
            return (Projection(Wildcard()),)
        result = []
        while True:
            expr = self.parse_expr(allow_aggregate=True)
            alias = self.expect_ident("alias") if self.accept_kw("as") else None
            result.append(Projection(expr, alias))
            if not self.accept_op(","):
                return tuple(result)

    def parse_source(self):
        stream = self.expect_ident("stream name")
        window = None
        if self.accept_op("#"):
            view_tok = self.tok
            view = self.expect_ident("view name")
            if view.lower() != "time":
                raise self.error(f"unsupported construct: #{view} view", ["time"], tok=view_tok)
            self.expect_op("(")
            window = self.parse_duration()
            self.expect_op(")")
        elif self.at_op("("):
            raise self.error("unsupported construct: filter in from clause")
        binding = None
        if self.accept_kw("as"):
            binding = self.expect_ident("binding name")
        elif self.tok.kind == "IDENT" and self.tok.value.lower() not in RESERVED | UNSUPPORTED_CLAUSES.keys():
            binding = self.advance().value
        if self.at_op(","):
            raise self.error("unsupported construct: join of several streams")
        if window is None:
            return PlainSource(stream, binding)
        return TimeWindowSource(stream, binding, window)

    def parse_pattern_expr(self):
        self.expect_op("[")
        self.expect_kw("every")
        binding = self.expect_ident("binding name")
        self.expect_op("=")
        stream = self.expect_ident("stream name")
        filt = None
        if self.accept_op("("):
            filt = self.parse_expr()
            self.expect_op(")")
        if not self.at_op("]"):
            if self.at_op("->") or self.at_kw("and", "or", "until", "where", "not"):
                raise self.error(f"unsupported construct: pattern operator {str(self.tok.value)!r}")
            raise self.error(f"unexpected {self.tok.describe()}", ["]"])
        self.advance()
        return binding, stream, filt

    def parse_field_ref(self) -> FieldRef:
        first = self.expect_ident("field name")
        if self.accept_op("."):
            second = self.expect_ident("field name")
            if self.at_op("."):
                raise self.error("unsupported construct: nested property access")
            return FieldRef(first, second)
        return FieldRef(None, first)

    # expressions -------------------------------------------------------------

    def parse_expr(self, allow_aggregate: bool = False) -> Expr:
        self._allow_agg = allow_aggregate
        return self.parse_or()

    def parse_or(self) -> Expr:
        operands = [self.parse_and()]
        while self.accept_kw("or"):
            operands.append(self.parse_and())
        return operands[0] if len(operands) == 1 else BoolOp("or", tuple(operands))

    def parse_and(self) -> Expr:
        operands = [self.parse_not()]
        while self.accept_kw("and"):
            operands.append(self.parse_not())
        return operands[0] if len(operands) == 1 else BoolOp("and", tuple(operands))

    def parse_not(self) -> Expr:
        if self.accept_kw("not"):
            return Not(self.parse_not())
        return self.parse_comparison()

    def parse_comparison(self) -> Expr:
        left = self.parse_unary()
        if self.at_op(">=", ">", "<", "<=", "=", "!=", "<>"):
            op = self.advance().value
            right = self.parse_unary()
            return Compare("!=" if op == "<>" else op, left, right)
        if self.at_op("+", "-", "/", "*"):
            raise self.error(f"unsupported construct: arithmetic operator {self.tok.value!r}")
        return left

    def parse_unary(self) -> Expr:
        if self.at_op("-"):
            minus = self.advance()
            if self.tok.kind != "NUMBER":
                raise self.error("unsupported construct: unary minus on a non-literal", ["number"], tok=minus)
            return Literal(-self.advance().value)
        return self.parse_primary()

    def parse_primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "NUMBER" or tok.kind == "STRING":
            self.advance()
            return Literal(tok.value)
        if self.at_kw("true", "false"):
            self.advance()
            return Literal(tok.value.lower() == "true")
        if self.accept_op("("):
            inner = self.parse_or()
            self.expect_op(")")
            return inner
        if tok.kind == "IDENT" and self.peek().kind == "OP" and self.peek().value == "(":
            return self.parse_call()
        if tok.kind == "IDENT" and tok.value.lower() not in RESERVED:
            return self.parse_field_ref()
        raise self.error(f"unexpected {tok.describe()}", ["identifier", "number", "string", "("])

    def parse_call(self) -> Expr:
        name_tok = self.advance()
        func = name_tok.value.lower()
        if func not in ("avg", "count"):
            raise self.error(f"unsupported construct: function {name_tok.value}()", tok=name_tok)
        if not self._allow_agg:
            raise self.error(f"aggregate {func}() is only allowed in the select list", tok=name_tok)
        self.expect_op("(")
        if func == "count" and self.accept_op("*"):
            self.expect_op(")")
            return Aggregate("count", None)
        self._allow_agg = False
        try:
            arg = self.parse_or()
        finally:
            self._allow_agg = True
        self.expect_op(")")
        return Aggregate(func, None if func == "count" else arg)


def _has_aggregate(expr: Expr) -> bool:
    if isinstance(expr, Aggregate):
        return True
    if isinstance(expr, Compare):
        return _has_aggregate(expr.left) or _has_aggregate(expr.right)
    if isinstance(expr, BoolOp):
        return any(_has_aggregate(o) for o in expr.operands)
    if isinstance(expr, Not):
        return _has_aggregate(expr.operand)
    return False


def parse_statement(text: str) -> Statement:
    """Parse one statement (an optional trailing ``;`` is allowed)."""
    return Parser(text).parse()
