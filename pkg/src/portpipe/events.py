"""Canonical event representation and payload decoders.

Raw JSON or XML payloads are homogenized into :class:`EventRecord` values
typed by an :class:`EventSchema`. Records travel between services in a
canonical JSON form (sorted keys, no whitespace) produced by
:func:`encode_canonical`.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional

logger = logging.getLogger(__name__)

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

GEN_TS_FIELD = "genTs"
TRANSF_TS_FIELD = "transfTs"


class FieldType(enum.Enum):
    INTEGER = "Integer"
    DOUBLE = "Double"
    STRING = "String"
    BOOLEAN = "Boolean"

    @classmethod
    def from_name(cls, name: str) -> "FieldType":
        try:
            return _TYPE_NAMES[name.lower()]
        except KeyError:
            raise ValueError(f"unknown field type {name!r}") from None


_TYPE_NAMES = {
    "integer": FieldType.INTEGER,
    "int": FieldType.INTEGER,
    "long": FieldType.INTEGER,
    "double": FieldType.DOUBLE,
    "float": FieldType.DOUBLE,
    "string": FieldType.STRING,
    "boolean": FieldType.BOOLEAN,
    "bool": FieldType.BOOLEAN,
}


class Format(enum.Enum):
    JSON = "json"
    XML = "xml"

    @classmethod
    def parse(cls, value: "str | Format") -> "Format":
        if isinstance(value, Format):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unsupported input type {value!r}; expected JSON or XML") from None


@dataclass(frozen=True)
class EventSchema:
    name: str
    fields: tuple[tuple[str, FieldType], ...]

    def __post_init__(self):
        if not self.fields:
            raise ValueError(f"schema {self.name!r} has no fields")
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"schema {self.name!r} has duplicate field names")
        object.__setattr__(self, "fields", tuple((n, FieldType(t)) for n, t in self.fields))

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)

    def type_of(self, name: str) -> Optional[FieldType]:
        for n, t in self.fields:
            if n == name:
                return t
        return None

    def to_dict(self) -> dict:
        return {"name": self.name, "fields": [{"name": n, "type": t.value} for n, t in self.fields]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EventSchema":
        """Build a schema from ``{"name": ..., "fields": [...]}``.

        ``fields`` may be a list of ``{"name", "type"}`` objects or a mapping
        of field name to type name.
        """
        raw = data["fields"]
        if isinstance(raw, Mapping):
            items = list(raw.items())
        else:
            items = [(f["name"], f["type"]) for f in raw]
        return cls(data["name"], tuple((n, FieldType.from_name(t)) for n, t in items))


@dataclass(frozen=True)
class EventRecord:
    """One typed event instance.

    ``recv_ts`` is local ingestion metadata and does not take part in
    equality or in the canonical encoding.
    """

    schema_name: str
    values: Mapping[str, Any]
    gen_ts: Optional[int] = None
    transf_ts: Optional[int] = None
    recv_ts: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class RawMessage:
    payload: bytes
    format: Format


class DecodeError(Exception):
    """Base class for payload decoding failures."""

    kind = "DecodeError"

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field

    def to_dict(self) -> dict:
        return {"error": self.kind, "field": self.field, "reason": str(self)}


class MalformedPayload(DecodeError):
    kind = "MalformedPayload"


class MissingField(DecodeError):
    kind = "MissingField"


class TypeMismatch(DecodeError):
    kind = "TypeMismatch"


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} is not allowed")


def _loads(payload: bytes) -> Any:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedPayload(f"payload is not valid UTF-8: {exc}") from None
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise MalformedPayload(f"invalid JSON: {exc}") from None


def _coerce_json(name: str, value: Any, ftype: FieldType) -> Any:
    if ftype is FieldType.INTEGER:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"field {name!r} expects Integer, got {value!r}", name)
        if isinstance(value, float):
            if not value.is_integer():
                raise TypeMismatch(f"field {name!r} expects Integer, got fractional {value!r}", name)
            value = int(value)
        if not INT64_MIN <= value <= INT64_MAX:
            raise TypeMismatch(f"field {name!r} overflows a 64-bit integer", name)
        return value
    if ftype is FieldType.DOUBLE:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"field {name!r} expects Double, got {value!r}", name)
        return _widen(name, value)
    if ftype is FieldType.STRING:
        if not isinstance(value, str):
            raise TypeMismatch(f"field {name!r} expects String, got {value!r}", name)
        return value
    if not isinstance(value, bool):
        raise TypeMismatch(f"field {name!r} expects Boolean, got {value!r}", name)
    return value


def _widen(name: str, value: "int | float") -> float:
    if isinstance(value, float):
        if not math.isfinite(value):
            raise TypeMismatch(f"field {name!r} is not finite", name)
        return value
    try:
        widened = float(value)
    except OverflowError:
        raise TypeMismatch(f"field {name!r} does not fit a Double", name) from None
    if int(widened) != value:
        raise TypeMismatch(f"field {name!r}: {value} is not exactly representable as Double", name)
    return widened


def _coerce_text(name: str, text: Optional[str], ftype: FieldType) -> Any:
    if ftype is FieldType.STRING:
        return text or ""
    raw = (text or "").strip()
    if ftype is FieldType.BOOLEAN:
        low = raw.lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise TypeMismatch(f"field {name!r} expects Boolean, got {raw!r}", name)
    if ftype is FieldType.INTEGER:
        try:
            number: "int | float" = int(raw)
        except ValueError:
            try:
                number = float(raw)
            except ValueError:
                raise TypeMismatch(f"field {name!r} expects Integer, got {raw!r}", name) from None
        return _coerce_json(name, number, ftype)
    try:
        number = float(raw)
    except ValueError:
        raise TypeMismatch(f"field {name!r} expects Double, got {raw!r}", name) from None
    return _widen(name, number)


def _coerce_ts(name: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise TypeMismatch(f"{name} must be a non-negative integer of nanoseconds", name)
    return value


def _parse_xml(payload: bytes) -> dict[str, Optional[str]]:
    try:
        root = ET.fromstring(payload)
    except (ET.ParseError, UnicodeDecodeError) as exc:
        raise MalformedPayload(f"invalid XML: {exc}") from None
    return {child.tag: child.text for child in root}


def decode(raw: RawMessage, schema: EventSchema, *, recv_ts: Optional[int] = None) -> EventRecord:
    """Decode a raw payload into a record of ``schema``.

    Raises exactly one :class:`DecodeError` subclass on failure.
    """
    fmt = Format.parse(raw.format)
    if fmt is Format.JSON:
        obj = _loads(raw.payload)
        if not isinstance(obj, dict):
            raise MalformedPayload("JSON payload must be an object")
        coerce = _coerce_json
    else:
        try:
            raw.payload.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"payload is not valid UTF-8: {exc}") from None
        obj = _parse_xml(raw.payload)
        coerce = _coerce_text

    values = {}
    for name, ftype in schema.fields:
        if name not in obj:
            raise MissingField(f"field {name!r} is missing", name)
        values[name] = coerce(name, obj[name], ftype)

    gen_ts = None
    if GEN_TS_FIELD in obj:
        value = obj[GEN_TS_FIELD]
        if fmt is Format.XML:
            try:
                value = int((value or "").strip())
            except ValueError:
                raise TypeMismatch(f"{GEN_TS_FIELD} must be an integer", GEN_TS_FIELD) from None
        gen_ts = _coerce_ts(GEN_TS_FIELD, value)

    if logger.isEnabledFor(logging.DEBUG):
        extra = set(obj) - set(values) - {GEN_TS_FIELD}
        if extra:
            logger.debug("dropping unknown fields %s for schema %s", sorted(extra), schema.name)

    return EventRecord(
        schema.name,
        values,
        gen_ts=gen_ts,
        recv_ts=time.time_ns() if recv_ts is None else recv_ts,
    )


def encode_canonical(record: EventRecord) -> bytes:
    obj: dict[str, Any] = {"schema": record.schema_name, "values": dict(record.values)}
    if record.gen_ts is not None:
        obj[GEN_TS_FIELD] = record.gen_ts
    if record.transf_ts is not None:
        obj[TRANSF_TS_FIELD] = record.transf_ts
    return dumps_canonical(obj)


def dumps_canonical(obj: Any) -> bytes:
    """Sorted-key, whitespace-free UTF-8 JSON."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode()


def decode_canonical(
    payload: bytes,
    schemas: Optional[Mapping[str, EventSchema]] = None,
    *,
    recv_ts: Optional[int] = None,
) -> EventRecord:
    """Inverse of :func:`encode_canonical`.

    When ``schemas`` is given the record is validated against its schema:
    unknown schema names and ill-typed values raise :class:`DecodeError`.
    """
    obj = _loads(payload)
    if not isinstance(obj, dict) or not isinstance(obj.get("schema"), str) or not isinstance(obj.get("values"), dict):
        raise MalformedPayload("canonical record needs string 'schema' and object 'values'")
    values = obj["values"]
    if schemas is not None:
        schema = schemas.get(obj["schema"])
        if schema is None:
            raise MalformedPayload(f"unknown schema {obj['schema']!r}")
        checked = {}
        for name, ftype in schema.fields:
            if name not in values:
                raise MissingField(f"field {name!r} is missing", name)
            checked[name] = _coerce_json(name, values[name], ftype)
        values = checked
    gen_ts = obj.get(GEN_TS_FIELD)
    transf_ts = obj.get(TRANSF_TS_FIELD)
    return EventRecord(
        obj["schema"],
        values,
        gen_ts=None if gen_ts is None else _coerce_ts(GEN_TS_FIELD, gen_ts),
        transf_ts=None if transf_ts is None else _coerce_ts(TRANSF_TS_FIELD, transf_ts),
        recv_ts=recv_ts,
    )


def stamp_transformed(record: EventRecord, ts: Optional[int] = None) -> EventRecord:
    return EventRecord(
        record.schema_name,
        record.values,
        gen_ts=record.gen_ts,
        transf_ts=time.time_ns() if ts is None else ts,
        recv_ts=record.recv_ts,
    )


def load_schema_file(path) -> EventSchema:
    with open(path, encoding="utf-8") as fh:
        return EventSchema.from_dict(json.load(fh))


def schema_registry(schemas: Iterable[EventSchema]) -> dict[str, EventSchema]:
    return {s.name: s for s in schemas}
