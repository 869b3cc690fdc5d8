"""Statement language: parser, syntax tree and runtime engine."""
from .ast import (
    Aggregate,
    Annotation,
    BoolOp,
    Compare,
    CreateContext,
    CreateSchema,
    Dataflow,
    DataflowParams,
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
from .engine import NS, ComplexEvent, Deployment, Engine
from .errors import ClockRegression, DeployError, EplError, ParseError, UnknownDeployment, UnknownStream
from .parser import parse_statement, tokenize

__all__ = [
    "Aggregate",
    "Annotation",
    "BoolOp",
    "ClockRegression",
    "Compare",
    "ComplexEvent",
    "CreateContext",
    "CreateSchema",
    "Dataflow",
    "DataflowParams",
    "DeployError",
    "Deployment",
    "Engine",
    "EplError",
    "FieldRef",
    "Literal",
    "NS",
    "Not",
    "ParseError",
    "Pattern",
    "PlainSource",
    "Projection",
    "Select",
    "Statement",
    "TimeWindowSource",
    "UnknownDeployment",
    "UnknownStream",
    "Wildcard",
    "parse_statement",
    "tokenize",
]
