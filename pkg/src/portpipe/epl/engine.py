"""Statement runtime: deployments, windows, contexts and the internal event bus.

The engine is single-writer and runs on an injected clock: callers pass
``now`` (integer nanoseconds) to :meth:`Engine.on_event` and
:meth:`Engine.advance_time`. Outputs of ``insert into`` statements are
routed back into the engine breadth-first, in deployment order.
"""
from __future__ import annotations

import collections
import itertools
import math
import operator
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Union

from ..events import EventRecord, EventSchema, FieldType
from .ast import (
    Aggregate,
    BoolOp,
    Compare,
    CreateContext,
    CreateSchema,
    Dataflow,
    Expr,
    FieldRef,
    Literal,
    Not,
    Pattern,
    Projection,
    Select,
    Statement,
    TimeWindowSource,
    Wildcard,
)
from .errors import ClockRegression, DeployError, UnknownDeployment, UnknownStream, type_error, unknown_schema
from .parser import parse_statement

NS = 1_000_000_000

_NUMERIC = (FieldType.INTEGER, FieldType.DOUBLE)
_COMPARE_OPS = {
    ">=": operator.ge,
    ">": operator.gt,
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
    "!=": operator.ne,
}


@dataclass(slots=True)
class ComplexEvent:
    """An event produced by a deployed statement."""

    stream_name: str
    values: dict
    tags: tuple[tuple[str, str], ...] = ()
    detect_ts: int = 0
    gen_ts: Optional[int] = None
    transf_ts: Optional[int] = None
    deployment_id: Optional[str] = field(default=None, compare=False)


class ExactSum:
    """Running float sum kept as non-overlapping partials (exact add/subtract)."""

    __slots__ = ("partials",)

    def __init__(self):
        self.partials: list[float] = []

    def add(self, x: float) -> None:
        partials = self.partials
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]

    def value(self) -> float:
        return math.fsum(self.partials)


class IntSum:
    __slots__ = ("total",)

    def __init__(self):
        self.total = 0

    def add(self, x: int) -> None:
        self.total += x

    def value(self) -> int:
        return self.total


# --------------------------------------------------------------------------
# expression compilation


class _Scope:
    """Resolves field references of one statement against its source schema."""

    def __init__(self, schema: EventSchema, stream: str, binding: Optional[str]):
        self.schema = schema
        self.stream = stream
        self.binding = binding

    def resolve(self, ref: FieldRef) -> FieldType:
        if ref.binding is not None and ref.binding not in (self.binding, self.stream):
            raise type_error(f"unknown stream binding {ref.binding!r} in {ref}")
        ftype = self.schema.type_of(ref.name)
        if ftype is None:
            raise type_error(f"stream {self.stream!r} has no field {ref.name!r}")
        return ftype


def infer_type(expr: Expr, scope: _Scope) -> FieldType:
    if isinstance(expr, FieldRef):
        return scope.resolve(expr)
    if isinstance(expr, Literal):
        v = expr.value
        if isinstance(v, bool):
            return FieldType.BOOLEAN
        if isinstance(v, int):
            return FieldType.INTEGER
        if isinstance(v, float):
            return FieldType.DOUBLE
        return FieldType.STRING
    if isinstance(expr, Aggregate):
        if expr.func == "count":
            return FieldType.INTEGER
        arg_type = infer_type(expr.arg, scope)
        if arg_type not in _NUMERIC:
            raise type_error(f"avg() needs a numeric argument, got {arg_type.value} in {expr}")
        return FieldType.DOUBLE
    if isinstance(expr, Compare):
        lt, rt = infer_type(expr.left, scope), infer_type(expr.right, scope)
        numeric = lt in _NUMERIC and rt in _NUMERIC
        if not numeric and lt != rt:
            raise type_error(f"cannot compare {lt.value} with {rt.value} in {expr}")
        if lt is FieldType.BOOLEAN and expr.op not in ("=", "!="):
            raise type_error(f"booleans only support = and != in {expr}")
        return FieldType.BOOLEAN
    if isinstance(expr, BoolOp):
        for operand in expr.operands:
            if infer_type(operand, scope) is not FieldType.BOOLEAN:
                raise type_error(f"operands of {expr.op} must be boolean in {expr}")
        return FieldType.BOOLEAN
    if isinstance(expr, Not):
        if infer_type(expr.operand, scope) is not FieldType.BOOLEAN:
            raise type_error(f"operand of not must be boolean in {expr}")
        return FieldType.BOOLEAN
    raise type_error(f"unsupported expression {expr}")


def collect_aggregates(expr: Expr, out: list[Aggregate]) -> None:
    if isinstance(expr, Aggregate):
        out.append(expr)
    elif isinstance(expr, Compare):
        collect_aggregates(expr.left, out)
        collect_aggregates(expr.right, out)
    elif isinstance(expr, BoolOp):
        for o in expr.operands:
            collect_aggregates(o, out)
    elif isinstance(expr, Not):
        collect_aggregates(expr.operand, out)


def compile_expr(expr: Expr, slots: Optional[dict[int, int]] = None) -> Callable[[dict, Any], Any]:
    """Compile to ``f(values, aggregates)``; ``slots`` maps id(Aggregate) to an index."""
    if isinstance(expr, FieldRef):
        name = expr.name
        return lambda v, a: v[name]
    if isinstance(expr, Literal):
        value = expr.value
        return lambda v, a: value
    if isinstance(expr, Aggregate):
        idx = slots[id(expr)]
        return lambda v, a: a[idx]
    if isinstance(expr, Compare):
        op = _COMPARE_OPS[expr.op]
        left, right = compile_expr(expr.left, slots), compile_expr(expr.right, slots)
        if isinstance(expr.right, Literal):
            const = expr.right.value
            return lambda v, a: op(left(v, a), const)
        return lambda v, a: op(left(v, a), right(v, a))
    if isinstance(expr, BoolOp):
        parts = tuple(compile_expr(o, slots) for o in expr.operands)
        if expr.op == "and":
            return lambda v, a: all(p(v, a) for p in parts)
        return lambda v, a: any(p(v, a) for p in parts)
    if isinstance(expr, Not):
        inner = compile_expr(expr.operand, slots)
        return lambda v, a: not inner(v, a)
    raise type_error(f"cannot compile {expr}")


# --------------------------------------------------------------------------
# runtimes


class _Runtime:
    """A deployed statement that consumes one stream."""

    def __init__(self, engine: "Engine", dep_id: str, stmt, source_stream: str, out_stream: Optional[str], output: Optional[EventSchema]):
        self.engine = engine
        self.dep_id = dep_id
        self.stmt = stmt
        self.source_stream = source_stream
        self.insert_into = getattr(stmt, "insert_into", None)
        self.out_stream = out_stream
        self.output = output
        self.tags = stmt.tags

    def on_event(self, values: dict, gen_ts, transf_ts, now: int) -> None:
        raise NotImplementedError

    def emit(self, row: dict, gen_ts, transf_ts, ts: int) -> None:
        self.engine._emit(self, row, gen_ts, transf_ts, ts)


class _RowRuntime(_Runtime):
    """Per-event projection; used for plain selects and ``every`` patterns."""

    def __init__(self, *args, projections, filt=None):
        super().__init__(*args)
        self.wildcard = projections is None
        self.columns = projections or ()
        self.filter = filt

    def on_event(self, values, gen_ts, transf_ts, now):
        if self.filter is not None and not self.filter(values, None):
            return
        if self.wildcard:
            row = dict(values)
        else:
            row = {name: f(values, None) for name, f in self.columns}
        self.emit(row, gen_ts, transf_ts, now)


class _Group:
    __slots__ = ("count", "sums", "last", "min_gen", "entries", "gen_mins")

    def __init__(self, sums):
        self.count = 0
        self.sums = sums
        self.last = None
        self.min_gen = None
        self.entries = None
        self.gen_mins = None


class _AggregateRuntime(_Runtime):
    """Grouped aggregation over a context interval, a sliding time window or the whole stream."""

    def __init__(self, *args, columns, aggregates, key_fields, arg_types, context=None, snapshot=False, window_ns=None):
        super().__init__(*args)
        self.columns = columns
        self.agg_args = [None if agg.func == "count" else compile_expr(agg.arg) for agg in aggregates]
        self.agg_funcs = [agg.func for agg in aggregates]
        self.arg_types = arg_types
        self.key_fields = key_fields
        self.context = context
        self.snapshot = snapshot
        self.window_ns = window_ns
        self.groups: dict[Any, _Group] = {}
        self.window: collections.deque = collections.deque()
        self._seq = itertools.count()
        if len(key_fields) == 1:
            kf = key_fields[0]
            self.key = lambda v: v[kf]
        else:
            self.key = lambda v: tuple(v[k] for k in key_fields)

    def _new_group(self) -> _Group:
        sums = [IntSum() if t is FieldType.INTEGER else ExactSum() for t in self.arg_types]
        group = _Group(sums)
        if self.window_ns is not None:
            group.entries = collections.deque()
            group.gen_mins = collections.deque()
        return group

    def _row(self, group: _Group) -> dict:
        aggs = []
        count = group.count
        for func, s in zip(self.agg_funcs, group.sums):
            if func == "count":
                aggs.append(count)
            else:
                aggs.append(s.value() / count)
        last = group.last
        return {name: f(last, aggs) for name, f in self.columns}

    def _args(self, values):
        return [None if f is None else f(values, None) for f in self.agg_args]

    def on_event(self, values, gen_ts, transf_ts, now):
        key = self.key(values)
        if self.window_ns is not None:
            self._evict(now)
        group = self.groups.get(key)
        if group is None:
            group = self.groups[key] = self._new_group()
        args = self._args(values)
        for s, x in zip(group.sums, args):
            if x is not None:
                s.add(x)
        group.count += 1
        group.last = values
        if self.window_ns is not None:
            seq = next(self._seq)
            group.entries.append((seq, args, gen_ts))
            self.window.append((now, key))
            if gen_ts is not None:
                mins = group.gen_mins
                while mins and mins[-1][1] >= gen_ts:
                    mins.pop()
                mins.append((seq, gen_ts))
            min_gen = group.gen_mins[0][1] if group.gen_mins else None
        else:
            if gen_ts is not None and (group.min_gen is None or gen_ts < group.min_gen):
                group.min_gen = gen_ts
            min_gen = group.min_gen
        if not self.snapshot:
            self.emit(self._row(group), min_gen, None, now)

    def _evict(self, now: int) -> None:
        horizon = now - self.window_ns
        window = self.window
        groups = self.groups
        while window and window[0][0] <= horizon:
            _, key = window.popleft()
            group = groups[key]
            seq, args, _ = group.entries.popleft()
            for s, x in zip(group.sums, args):
                if x is not None:
                    s.add(-x)
            group.count -= 1
            if group.gen_mins and group.gen_mins[0][0] == seq:
                group.gen_mins.popleft()
            if group.count == 0:
                del groups[key]

    def terminate(self) -> list[tuple[dict, Optional[int]]]:
        """Close the current context interval; returns snapshot rows if configured."""
        rows = []
        if self.snapshot:
            rows = [(self._row(g), g.min_gen) for g in self.groups.values()]
        self.groups = {}
        return rows


class _ContextRuntime:
    """Back-to-back intervals of fixed length starting at deployment time."""

    def __init__(self, name: str, duration_ns: int, start: Optional[int], order: int):
        self.name = name
        self.duration_ns = duration_ns
        self.start = start
        self.order = order
        self.members: list[_AggregateRuntime] = []
        self.registered = True

    @property
    def next_end(self) -> Optional[int]:
        return None if self.start is None else self.start + self.duration_ns

    @property
    def active(self) -> bool:
        return self.registered or bool(self.members)


@dataclass
class Deployment:
    id: str
    statement: Statement
    text: Optional[str] = None

    @property
    def kind(self) -> str:
        return type(self.statement).__name__


class Engine:
    """Single-writer statement engine.

    ``clock`` (optional) stamps ``detect_ts`` on emitted events; by default the
    engine time of the emission is used, which keeps outputs deterministic.
    """

    def __init__(self, clock: Optional[Callable[[], int]] = None, now: Optional[int] = None):
        self.clock = clock
        self.now = now
        self.schemas: dict[str, EventSchema] = {}
        self.derived: dict[str, tuple[EventSchema, set[str]]] = {}
        self.contexts: dict[str, _ContextRuntime] = {}
        self.deployments: dict[str, Deployment] = {}
        self._context_runtimes: list[_ContextRuntime] = []
        self._runtimes: dict[str, _Runtime] = {}
        self._routes: dict[str, list[_Runtime]] = {}
        self._ids = itertools.count(1)
        self._context_order = itertools.count()
        self._next_boundary: Optional[int] = None
        self._out: Optional[list[ComplexEvent]] = None
        self._work: collections.deque = collections.deque()

    # registry --------------------------------------------------------------

    def stream_schema(self, name: str) -> Optional[EventSchema]:
        schema = self.schemas.get(name)
        if schema is None and name in self.derived:
            schema = self.derived[name][0]
        return schema

    @property
    def streams(self) -> set[str]:
        return set(self.schemas) | set(self.derived)

    # deployment ------------------------------------------------------------

    def deploy(self, stmt: Union[Statement, str], text: Optional[str] = None) -> str:
        """Install a statement (or statement text); returns its deployment id."""
        if isinstance(stmt, str):
            text = stmt
            stmt = parse_statement(stmt)
        dep_id = f"d{next(self._ids)}"
        if isinstance(stmt, CreateSchema):
            self._deploy_schema(stmt)
        elif isinstance(stmt, CreateContext):
            self._deploy_context(stmt)
        elif isinstance(stmt, Select):
            self._deploy_select(dep_id, stmt)
        elif isinstance(stmt, Pattern):
            self._deploy_pattern(dep_id, stmt)
        elif isinstance(stmt, Dataflow):
            self._deploy_dataflow(stmt)
        else:
            raise TypeError(f"not a statement: {stmt!r}")
        self.deployments[dep_id] = Deployment(dep_id, stmt, text)
        return dep_id

    def _deploy_schema(self, stmt: CreateSchema) -> None:
        if stmt.name in self.schemas or stmt.name in self.derived:
            raise DeployError("DuplicateSchema", f"schema {stmt.name!r} already exists")
        self.schemas[stmt.name] = EventSchema(stmt.name, stmt.fields)

    def _deploy_context(self, stmt: CreateContext) -> None:
        if stmt.name in self.contexts:
            raise DeployError("DuplicateContext", f"context {stmt.name!r} already exists")
        ctx = _ContextRuntime(stmt.name, stmt.duration_s * NS, self.now, next(self._context_order))
        self.contexts[stmt.name] = ctx
        self._context_runtimes.append(ctx)
        self._refresh_boundary()

    def _deploy_dataflow(self, stmt: Dataflow) -> None:
        if stmt.out_schema not in self.schemas:
            raise unknown_schema(stmt.out_schema)
        for dep in self.deployments.values():
            if isinstance(dep.statement, Dataflow) and dep.statement.name == stmt.name:
                raise DeployError("DuplicateDataflow", f"dataflow {stmt.name!r} already exists")

    def _source_schema(self, stream: str) -> EventSchema:
        schema = self.stream_schema(stream)
        if schema is None:
            raise unknown_schema(stream)
        return schema

    def _output_schema(self, out_stream: Optional[str], projections, scope: _Scope) -> EventSchema:
        fields = []
        for proj in projections:
            if isinstance(proj.expr, Wildcard):
                fields.extend(scope.schema.fields)
            else:
                fields.append((proj.name, infer_type(proj.expr, scope)))
        names = [n for n, _ in fields]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise type_error(f"duplicate output columns {sorted(dupes)}")
        return EventSchema(out_stream or "_", tuple(fields))

    def _check_insert(self, stream: str, output: EventSchema) -> None:
        existing = self.stream_schema(stream)
        if existing is not None and dict(existing.fields) != dict(output.fields):
            raise type_error(f"insert into {stream!r}: columns {dict(output.fields)} do not match {dict(existing.fields)}")

    def _register_insert(self, dep_id: str, stream: str, output: EventSchema) -> None:
        if stream in self.schemas:
            return
        entry = self.derived.get(stream)
        if entry is None:
            self.derived[stream] = (EventSchema(stream, output.fields), {dep_id})
        else:
            entry[1].add(dep_id)

    @staticmethod
    def _columns(projections, scope: _Scope, slots=None):
        if len(projections) == 1 and isinstance(projections[0].expr, Wildcard):
            return None
        return tuple((p.name, compile_expr(p.expr, slots)) for p in projections)

    def _deploy_select(self, dep_id: str, stmt: Select) -> None:
        source = stmt.source
        schema = self._source_schema(source.stream)
        scope = _Scope(schema, source.stream, source.binding)
        out_stream = stmt.insert_into or stmt.statement_name or dep_id
        output = self._output_schema(out_stream, stmt.projections, scope)
        if stmt.insert_into:
            self._check_insert(stmt.insert_into, output)
        context = None
        if stmt.context is not None:
            context = self.contexts.get(stmt.context)
            if context is None:
                raise DeployError("UnknownContext", f"context {stmt.context!r} is not deployed")
        for ref in stmt.group_by:
            scope.resolve(ref)

        aggregates: list[Aggregate] = []
        for proj in stmt.projections:
            collect_aggregates(proj.expr, aggregates)
        base = (self, dep_id, stmt, source.stream, out_stream, output)
        if not aggregates and not stmt.group_by and context is None:
            runtime: _Runtime = _RowRuntime(*base, projections=self._columns(stmt.projections, scope))
        else:
            slots = {id(a): i for i, a in enumerate(aggregates)}
            columns = self._columns(stmt.projections, scope, slots)
            if columns is None:
                columns = tuple((n, compile_expr(FieldRef(None, n))) for n in schema.field_names)
            arg_types = [FieldType.INTEGER if a.func == "count" else infer_type(a.arg, scope) for a in aggregates]
            window_ns = None
            if isinstance(source, TimeWindowSource):
                window_ns = round(source.window_duration_s * NS)
            runtime = _AggregateRuntime(
                *base,
                columns=columns,
                aggregates=aggregates,
                key_fields=tuple(ref.name for ref in stmt.group_by),
                arg_types=arg_types,
                context=context,
                snapshot=stmt.output_snapshot,
                window_ns=window_ns,
            )
            if context is not None:
                context.members.append(runtime)
        self._install(dep_id, runtime, output)

    def _deploy_pattern(self, dep_id: str, stmt: Pattern) -> None:
        schema = self._source_schema(stmt.stream)
        scope = _Scope(schema, stmt.stream, stmt.binding)
        out_stream = stmt.insert_into or stmt.statement_name or dep_id
        output = self._output_schema(out_stream, stmt.projections, scope)
        if stmt.insert_into:
            self._check_insert(stmt.insert_into, output)
        filt = None
        if stmt.filter is not None:
            if infer_type(stmt.filter, scope) is not FieldType.BOOLEAN:
                raise type_error(f"pattern filter must be boolean: {stmt.filter}")
            filt = compile_expr(stmt.filter)
        runtime = _RowRuntime(self, dep_id, stmt, stmt.stream, out_stream, output, projections=self._columns(stmt.projections, scope), filt=filt)
        self._install(dep_id, runtime, output)

    def _install(self, dep_id: str, runtime: _Runtime, output: EventSchema) -> None:
        if runtime.insert_into:
            self._register_insert(dep_id, runtime.insert_into, output)
        self._runtimes[dep_id] = runtime
        self._routes.setdefault(runtime.source_stream, []).append(runtime)

    def undeploy(self, dep_id: str) -> None:
        dep = self.deployments.pop(dep_id, None)
        if dep is None:
            raise UnknownDeployment(f"no deployment {dep_id!r}")
        stmt = dep.statement
        if isinstance(stmt, CreateSchema):
            self.schemas.pop(stmt.name, None)
        elif isinstance(stmt, CreateContext):
            ctx = self.contexts.pop(stmt.name)
            ctx.registered = False
            self._prune_contexts()
        runtime = self._runtimes.pop(dep_id, None)
        if runtime is not None:
            routes = self._routes[runtime.source_stream]
            routes.remove(runtime)
            if not routes:
                del self._routes[runtime.source_stream]
            if runtime.insert_into and runtime.insert_into in self.derived:
                producers = self.derived[runtime.insert_into][1]
                producers.discard(dep_id)
                if not producers:
                    del self.derived[runtime.insert_into]
            if isinstance(runtime, _AggregateRuntime) and runtime.context is not None:
                runtime.context.members.remove(runtime)
                self._prune_contexts()

    def _prune_contexts(self) -> None:
        self._context_runtimes = [c for c in self._context_runtimes if c.active]
        self._refresh_boundary()

    # event processing ------------------------------------------------------

    def _refresh_boundary(self) -> None:
        ends = [c.next_end for c in self._context_runtimes if c.start is not None]
        self._next_boundary = min(ends) if ends else None

    def _set_time(self, now: int) -> None:
        if self.now is not None and now < self.now:
            raise ClockRegression(now, self.now)
        self.now = now
        pending = False
        for ctx in self._context_runtimes:
            if ctx.start is None:
                ctx.start = now
                pending = True
        if pending:
            self._refresh_boundary()

    def advance_time(self, now: int) -> list[ComplexEvent]:
        """Move the engine clock to ``now``, closing every elapsed context interval."""
        self._set_time(now)
        out: list[ComplexEvent] = []
        self._out = out
        try:
            self._advance(now)
        finally:
            self._out = None
        return out

    def _advance(self, now: int) -> None:
        while self._next_boundary is not None and self._next_boundary <= now:
            end = self._next_boundary
            rows = []
            for ctx in self._context_runtimes:
                if ctx.start is None or ctx.next_end != end:
                    continue
                if any(m.groups for m in ctx.members):
                    for member in ctx.members:
                        rows.extend((member, row, gen) for row, gen in member.terminate())
                    ctx.start = end
                else:
                    # Nothing accumulated: skip straight over the empty intervals.
                    ctx.start = end + ((now - end) // ctx.duration_ns) * ctx.duration_ns
            self._refresh_boundary()
            for member, row, gen in rows:
                member.emit(row, gen, None, end)
            self._drain()

    def on_event(self, record: Union[EventRecord, ComplexEvent], now: Optional[int] = None) -> list[ComplexEvent]:
        """Route one event to every statement reading its stream.

        Context intervals that elapsed before ``now`` are closed first, so
        the returned list may start with their snapshot rows.
        """
        if isinstance(record, EventRecord):
            stream, values, gen_ts, transf_ts = record.schema_name, record.values, record.gen_ts, record.transf_ts
        else:
            stream, values, gen_ts, transf_ts = record.stream_name, record.values, record.gen_ts, record.transf_ts
        if stream not in self.schemas and stream not in self.derived:
            raise UnknownStream(f"no schema or derived stream named {stream!r}")
        if now is None:
            now = self.now if self.now is not None else 0
        self._set_time(now)
        out: list[ComplexEvent] = []
        self._out = out
        try:
            if self._next_boundary is not None and self._next_boundary <= now:
                self._advance(now)
            self._route(stream, values, gen_ts, transf_ts, now)
            self._drain()
        finally:
            self._out = None
            self._work.clear()
        return out

    def _route(self, stream: str, values: dict, gen_ts, transf_ts, now: int) -> None:
        for runtime in self._routes.get(stream, ()):
            runtime.on_event(values, gen_ts, transf_ts, now)

    def _drain(self) -> None:
        work = self._work
        while work:
            self._route(*work.popleft())

    def _emit(self, runtime: _Runtime, row: dict, gen_ts, transf_ts, ts: int) -> None:
        ev = ComplexEvent(
            runtime.out_stream,
            row,
            runtime.tags,
            self.clock() if self.clock is not None else ts,
            gen_ts,
            transf_ts,
            runtime.dep_id,
        )
        self._out.append(ev)
        if runtime.insert_into:
            self._work.append((runtime.insert_into, row, gen_ts, transf_ts, ts))

    def process(self, events: Iterable[tuple[Union[EventRecord, ComplexEvent], int]]) -> list[ComplexEvent]:
        """Feed ``(event, now)`` pairs in order and collect every output."""
        out = []
        for event, now in events:
            out.extend(self.on_event(event, now))
        return out
