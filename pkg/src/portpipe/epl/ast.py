"""Syntax tree for the supported statement language."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from ..events import FieldType


@dataclass(frozen=True)
class Annotation:
    """``@public``, ``@buseventtype``, ``@Name('x')`` or ``@Tag(name=.., value=..)``."""

    kind: str
    name: Optional[str] = None
    value: Optional[str] = None


# expressions -----------------------------------------------------------------


@dataclass(frozen=True)
class FieldRef:
    binding: Optional[str]
    name: str

    def __str__(self):
        return f"{self.binding}.{self.name}" if self.binding else self.name


@dataclass(frozen=True)
class Literal:
    value: Union[int, float, str, bool]

    def __str__(self):
        if isinstance(self.value, str):
            return "'" + self.value.replace("'", "\\'") + "'"
        if isinstance(self.value, bool):
            return "true" if self.value else "false"
        return repr(self.value)


@dataclass(frozen=True)
class Aggregate:
    func: str  # "avg" | "count"
    arg: Optional["Expr"]  # None for count(*)

    def __str__(self):
        return f"{self.func}({'*' if self.arg is None else self.arg})"


@dataclass(frozen=True)
class Compare:
    op: str  # one of >=, >, <, <=, =, !=
    left: "Expr"
    right: "Expr"

    def __str__(self):
        return f"{self.left} {self.op} {self.right}"


@dataclass(frozen=True)
class BoolOp:
    op: str  # "and" | "or"
    operands: tuple["Expr", ...]

    def __str__(self):
        return "(" + f" {self.op} ".join(str(o) for o in self.operands) + ")"


@dataclass(frozen=True)
class Not:
    operand: "Expr"

    def __str__(self):
        return f"not {self.operand}"


@dataclass(frozen=True)
class Wildcard:
    def __str__(self):
        return "*"


Expr = Union[FieldRef, Literal, Aggregate, Compare, BoolOp, Not, Wildcard]


@dataclass(frozen=True)
class Projection:
    expr: Expr
    alias: Optional[str] = None

    @property
    def name(self) -> str:
        if self.alias:
            return self.alias
        if isinstance(self.expr, FieldRef):
            return self.expr.name
        return str(self.expr)


# sources -----------------------------------------------------------------------


@dataclass(frozen=True)
class PlainSource:
    stream: str
    binding: Optional[str] = None


@dataclass(frozen=True)
class TimeWindowSource:
    stream: str
    binding: Optional[str]
    window_duration_s: float


StreamSource = Union[PlainSource, TimeWindowSource]


# statements ------------------------------------------------------------------


class _Statement:
    annotations: tuple[Annotation, ...]

    @property
    def tags(self) -> tuple[tuple[str, str], ...]:
        return tuple((a.name, a.value) for a in self.annotations if a.kind == "Tag")

    @property
    def statement_name(self) -> Optional[str]:
        for a in self.annotations:
            if a.kind == "Name":
                return a.value
        return None


@dataclass(frozen=True)
class CreateSchema(_Statement):
    name: str
    fields: tuple[tuple[str, FieldType], ...]
    annotations: tuple[Annotation, ...] = ()


@dataclass(frozen=True)
class CreateContext(_Statement):
    name: str
    duration_s: int
    annotations: tuple[Annotation, ...] = ()


@dataclass(frozen=True)
class Select(_Statement):
    projections: tuple[Projection, ...]
    source: StreamSource
    annotations: tuple[Annotation, ...] = ()
    context: Optional[str] = None
    insert_into: Optional[str] = None
    group_by: tuple[FieldRef, ...] = ()
    output_snapshot: bool = False


@dataclass(frozen=True)
class Pattern(_Statement):
    """``select ... from pattern [every binding = stream (filter)]``."""

    projections: tuple[Projection, ...]
    binding: str
    stream: str
    filter: Optional[Expr] = None
    annotations: tuple[Annotation, ...] = ()
    insert_into: Optional[str] = None


@dataclass(frozen=True)
class DataflowParams:
    host: str
    queue_name: str
    collector: Optional[str] = None
    log_messages: bool = False
    declare_auto_delete: bool = False
    declare_durable: bool = False


@dataclass(frozen=True)
class Dataflow(_Statement):
    """``create dataflow N <source> -> s<Schema> {params} EventBusSink(s) {}``."""

    name: str
    source_kind: str
    out_stream: str
    out_schema: str
    params: DataflowParams
    sink: str = "EventBusSink"
    annotations: tuple[Annotation, ...] = ()


Statement = Union[CreateSchema, CreateContext, Select, Pattern, Dataflow]
