import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epl_corpus import ENGINES, EXPECTED, TEXTS
from portpipe.epl import Engine, ParseError, parse_statement, tokenize


@pytest.mark.parametrize("key", sorted(TEXTS))
def test_corpus_parses_to_golden_tree(key):
    assert parse_statement(TEXTS[key]) == EXPECTED[key]


@pytest.mark.parametrize("group", ENGINES, ids=["dummy", "airquality"])
def test_corpus_deploys(group):
    engine = Engine()
    ids = [engine.deploy(TEXTS[k]) for k in group]
    assert len(set(ids)) == len(ids)


def test_number_may_abut_after_keyword():
    assert parse_statement("create context C start @now end after3600 s").duration_s == 3600
    assert parse_statement("create context C start @now end after 3600 s").duration_s == 3600


@pytest.mark.parametrize(
    "unit,seconds",
    [("sec", 5), ("second", 5), ("seconds", 5), ("min", 300), ("minute", 300), ("minutes", 300), ("hour", 18000), ("hours", 18000)],
)
def test_time_units(unit, seconds):
    stmt = parse_statement(f"select avg(x.v) as v from S#time(5 {unit}) x")
    assert stmt.source.window_duration_s == seconds


def test_keywords_case_insensitive_identifiers_not():
    upper = re.sub(r"\b(select|from|insert|into|as|group|by|pattern|every|and)\b", lambda m: m.group(1).upper(), TEXTS["L7_4"])
    assert upper != TEXTS["L7_4"]
    assert parse_statement(upper) == EXPECTED["L7_4"]
    assert parse_statement("select * from dummy").source.stream == "dummy"


def test_dangling_paren_position():
    with pytest.raises(ParseError) as exc:
        parse_statement("select avg(")
    assert (exc.value.line, exc.value.column) == (1, 12)
    assert "identifier" in exc.value.expected


def test_error_position_on_later_line():
    with pytest.raises(ParseError) as exc:
        parse_statement("create schema X (\n  a int,\n  b Foo)")
    assert (exc.value.line, exc.value.column) == (3, 5)
    assert "Double" in exc.value.expected


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("create schema", "end of input"),
        ("create schema X ()", "field name"),
        ("create schema X (a Foo)", "unknown field type"),
        ("create schema X (a int, a int)", "duplicate field"),
        ("@Tag(name='a', value='b') @Tag(name='a', value='c') select * from X", "duplicate @Tag"),
        ("@Tag(name='a') select * from X", "@Tag requires"),
        ("select * from X output snapshot when terminated", "requires a context"),
        ("select * from pattern [every a=X (avg(a.v) > 1)]", "only allowed in the select list"),
        ("select * from X#time(0 sec)", "positive"),
        ("select 'abc from X", "unterminated string"),
        ("create dataflow D AMQPSource -> o<X> {host: 'h'} EventBusSink(o) {}", "queueName"),
        ("create dataflow D AMQPSource -> o<X> {host: 'h', queueName: 'q', bogus: 1} EventBusSink(o) {}", "bogus"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(ParseError, match=re.escape(fragment)):
        parse_statement(text)


@pytest.mark.parametrize(
    "text,construct",
    [
        ("select * from X where a > 1", "where clause"),
        ("select * from A a, B b", "join"),
        ("select * from A a join B b", "join"),
        ("select * from X match_recognize", "match_recognize"),
        ("select * from X#length(5)", "#length view"),
        ("select * from pattern [every a=X -> b=Y]", "'->'"),
        ("select distinct * from X", "select distinct"),
        ("select * from X order by a", "order by"),
    ],
)
def test_unsupported_constructs_are_named(text, construct):
    with pytest.raises(ParseError, match="unsupported construct: .*" + re.escape(construct)):
        parse_statement(text)


def test_tokenize_positions():
    toks = tokenize("select\n  avg(x)")
    assert [(t.value, t.line, t.col) for t in toks[:3]] == [("select", 1, 1), ("avg", 2, 3), ("(", 2, 6)]


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("selctfromavg(*)[]#,.;'\"@= <>0123456789 \nabxyzinsetupw")), max_size=60))
def test_parse_is_total(text):
    # Either a statement or a positioned ParseError, never anything else.
    try:
        parse_statement(text)
    except ParseError as exc:
        assert exc.line >= 1 and exc.column >= 1


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(sorted(TEXTS)), st.data())
def test_truncation_never_crashes(key, data):
    text = TEXTS[key]
    cut = data.draw(st.integers(0, len(text)))
    try:
        parse_statement(text[:cut])
    except ParseError:
        pass


def test_documented_corpus_matches_golden_texts():
    from pathlib import Path

    doc = (Path(__file__).parent.parent / "docs" / "epl-subset.md").read_text()
    for key, text in TEXTS.items():
        assert f"### {key}\n\n```\n{text}\n```" in doc
