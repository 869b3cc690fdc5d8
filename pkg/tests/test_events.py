import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portpipe.events import (
    EventRecord,
    EventSchema,
    FieldType,
    Format,
    MalformedPayload,
    MissingField,
    RawMessage,
    TypeMismatch,
    DecodeError,
    decode,
    decode_canonical,
    encode_canonical,
)

DUMMY = EventSchema("Dummy", (("p1", FieldType.STRING), ("p2", FieldType.DOUBLE)))
AIR = EventSchema(
    "AirQualityMeasurement",
    (("PM10", FieldType.INTEGER), ("PM25", FieldType.DOUBLE), ("stationId", FieldType.INTEGER)),
)


def jdec(obj, schema=AIR):
    payload = obj if isinstance(obj, bytes) else json.dumps(obj).encode()
    return decode(RawMessage(payload, Format.JSON), schema)


def test_json_dummy_record():
    rec = jdec({"p1": "x", "p2": 1.0}, DUMMY)
    assert rec.values == {"p1": "x", "p2": 1.0}
    assert rec.gen_ts is None
    assert rec.recv_ts is not None


def test_xml_air_quality_record():
    raw = RawMessage(b"<e><PM10>7</PM10><PM25>2.5</PM25><stationId>1</stationId></e>", Format.XML)
    rec = decode(raw, AIR)
    assert rec.values == {"PM10": 7, "PM25": 2.5, "stationId": 1}
    assert type(rec.values["PM10"]) is int


def test_xml_attributes_ignored_and_gen_ts_read():
    raw = RawMessage(b'<e unit="ug"><PM10 a="1">7</PM10><PM25>2</PM25><stationId>1</stationId><genTs>42</genTs></e>', Format.XML)
    rec = decode(raw, AIR)
    assert rec.values["PM25"] == 2.0 and rec.gen_ts == 42


def test_non_numeric_integer_is_type_mismatch():
    with pytest.raises(TypeMismatch) as info:
        jdec({"PM10": "high", "PM25": 2.5, "stationId": 1})
    assert info.value.field == "PM10"


def test_missing_field_names_field():
    with pytest.raises(MissingField) as info:
        jdec({"PM10": 1, "stationId": 1})
    assert info.value.field == "PM25"


@pytest.mark.parametrize("payload", [b"{", b"[1,2]", b"\xff\xfe", b'{"PM10": NaN, "PM25": 1, "stationId": 1}'])
def test_malformed_payloads(payload):
    with pytest.raises(MalformedPayload):
        jdec(payload)


def test_malformed_xml():
    with pytest.raises(MalformedPayload):
        decode(RawMessage(b"<e><PM10>1</e>", Format.XML), AIR)


def test_integer_coercion_rules():
    assert jdec({"PM10": 7.0, "PM25": 1, "stationId": 1}).values["PM10"] == 7
    with pytest.raises(TypeMismatch):
        jdec({"PM10": 7.5, "PM25": 1, "stationId": 1})
    with pytest.raises(TypeMismatch):
        jdec({"PM10": True, "PM25": 1, "stationId": 1})
    with pytest.raises(TypeMismatch):
        jdec({"PM10": 2**63, "PM25": 1, "stationId": 1})
    assert jdec({"PM10": 2**63 - 1, "PM25": 1, "stationId": 1}).values["PM10"] == 2**63 - 1


def test_double_widens_exactly_or_fails():
    rec = jdec({"PM10": 1, "PM25": 3, "stationId": 1})
    assert rec.values["PM25"] == 3.0 and type(rec.values["PM25"]) is float
    # 2**53 + 1 has no exact Double; silent rounding is refused.
    with pytest.raises(TypeMismatch):
        jdec({"PM10": 1, "PM25": 2**53 + 1, "stationId": 1})


def test_extra_fields_dropped_and_gen_ts_kept():
    rec = jdec({"PM10": 1, "PM25": 1.5, "stationId": 2, "genTs": 99, "noise": "x"})
    assert rec.values == {"PM10": 1, "PM25": 1.5, "stationId": 2}
    assert rec.gen_ts == 99


def test_canonical_bytes_exact():
    rec = EventRecord("Dummy", {"p2": 1.0, "p1": "x"})
    assert encode_canonical(rec) == b'{"schema":"Dummy","values":{"p1":"x","p2":1.0}}'
    rec = EventRecord("Dummy", {"p1": "x", "p2": 1.0}, gen_ts=5)
    assert encode_canonical(rec) == b'{"genTs":5,"schema":"Dummy","values":{"p1":"x","p2":1.0}}'


def test_recv_ts_not_part_of_identity():
    a = EventRecord("Dummy", {"p1": "x", "p2": 1.0}, gen_ts=1, recv_ts=10)
    b = EventRecord("Dummy", {"p1": "x", "p2": 1.0}, gen_ts=1, recv_ts=20)
    assert a == b and encode_canonical(a) == encode_canonical(b)


def test_decode_canonical_validates_against_schema():
    payload = b'{"schema":"Dummy","values":{"p1":"x","p2":"nope"}}'
    with pytest.raises(TypeMismatch):
        decode_canonical(payload, {"Dummy": DUMMY})
    with pytest.raises(MalformedPayload):
        decode_canonical(b'{"schema":"Other","values":{}}', {"Dummy": DUMMY})


def test_schema_invariants():
    with pytest.raises(ValueError):
        EventSchema("E", ())
    with pytest.raises(ValueError):
        EventSchema("E", (("a", FieldType.STRING), ("a", FieldType.DOUBLE)))
    with pytest.raises(ValueError):
        FieldType.from_name("decimal")
    assert EventSchema.from_dict({"name": "E", "fields": {"a": "long"}}).fields == (("a", FieldType.INTEGER),)


# --- properties -------------------------------------------------------------

field_names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=8)
typed_value = {
    FieldType.INTEGER: st.integers(min_value=-(2**63), max_value=2**63 - 1),
    FieldType.DOUBLE: st.floats(allow_nan=False, allow_infinity=False),
    FieldType.STRING: st.text(),
    FieldType.BOOLEAN: st.booleans(),
}


@st.composite
def records(draw):
    names = draw(st.lists(field_names, min_size=1, max_size=6, unique=True))
    types = [draw(st.sampled_from(list(FieldType))) for _ in names]
    schema = EventSchema("S", tuple(zip(names, types)))
    values = {n: draw(typed_value[t]) for n, t in zip(names, types)}
    gen_ts = draw(st.one_of(st.none(), st.integers(min_value=0, max_value=2**63 - 1)))
    transf_ts = draw(st.one_of(st.none(), st.integers(min_value=0, max_value=2**63 - 1)))
    return schema, EventRecord("S", values, gen_ts=gen_ts, transf_ts=transf_ts)


@settings(max_examples=1000, deadline=None)
@given(records())
def test_canonical_round_trip(sample):
    schema, rec = sample
    data = encode_canonical(rec)
    back = decode_canonical(data, {"S": schema})
    assert back == rec
    # Types survive: ints stay ints, floats stay floats (including -0.0).
    for name, value in rec.values.items():
        assert type(back.values[name]) is type(value)
        if isinstance(value, float):
            assert math.copysign(1, value) == math.copysign(1, back.values[name])
    assert encode_canonical(back) == data


@settings(max_examples=300, deadline=None)
@given(records(), records())
def test_canonical_injective(a, b):
    (_, ra), (_, rb) = a, b
    if ra != rb:
        assert encode_canonical(ra) != encode_canonical(rb)


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=200))
def test_decode_total(payload):
    # Every input yields a record or exactly one typed error.
    for fmt in Format:
        try:
            rec = decode(RawMessage(payload, fmt), AIR)
        except DecodeError as exc:
            assert exc.kind in {"MalformedPayload", "MissingField", "TypeMismatch"}
        else:
            assert set(rec.values) == {"PM10", "PM25", "stationId"}


@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.sampled_from(["PM10", "PM25", "stationId", "genTs", "x"]), st.one_of(st.integers(-(2**70), 2**70), st.floats(), st.text(max_size=3), st.booleans(), st.none())))
def test_decode_total_json_objects(obj):
    try:
        payload = json.dumps(obj).encode()
    except ValueError:
        return
    try:
        rec = jdec(payload)
    except DecodeError:
        return
    assert type(rec.values["PM10"]) is int and type(rec.values["PM25"]) is float
