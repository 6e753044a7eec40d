import random
from functools import lru_cache

import pytest
from hypothesis import given, settings, strategies as st
from lxml import etree

from conftest import FIXTURES, KEY, NOW, make_token, sample_dicom
from gridbox.federation import clique
from gridbox.formal import format_formal, parse_formal
from gridbox.model import GlobalId
from gridbox.query import (
    MergeError,
    ResultSet,
    SchemaError,
    TranslationError,
    Vocabulary,
    eval_local,
    merge_results,
    resultset_xml,
    translate,
    xml_resultset,
)
from gridbox.oracle import oracle_answer
from gridbox.sim import Federation, generate, random_query
from gridbox.store import Store
from strategies import result_sets

Q1 = "find all mammographic images for all women over 50 undergoing HRT treatment"
Q2 = "find all patients who have developed cancer in the other breast after successful therapy on the first cancer"
SCHEMA = etree.XMLSchema(etree.parse(str(FIXTURES / "resultset.xsd")))
QID = "0123456789abcdef0123456789abcdef"


def test_translate_first_clinical_query():
    q = translate(Q1, Vocabulary.default())
    assert format_formal(q) == 'FIND IMAGES WHERE patient.sex = "F" AND patient.age > 50 AND patient.hrt = true'


def test_translate_second_clinical_query():
    q = translate(Q2, Vocabulary.default())
    assert format_formal(q) == (
        'FIND PATIENTS WHERE EXISTS EPISODE e1 (e1.diagnosis = "cancer" AND e1.therapy_outcome = "successful" '
        'AND EXISTS EPISODE e2 (e2.diagnosis = "cancer" AND e2.laterality != e1.laterality '
        "AND e2.date > e1.therapy_end_date))"
    )


@pytest.mark.parametrize(
    "text,msg",
    [
        ("find all images for all giraffes", "giraffes.*position 6"),
        ("", "empty"),
        ("women over 50", "no target"),
        ("find all images", "no recognised conditions"),
    ],
)
def test_translation_errors(text, msg):
    with pytest.raises(TranslationError, match=msg):
        translate(text, Vocabulary.default())


def test_vocabulary_rejects_bad_fragment():
    with pytest.raises(TranslationError, match="line 1"):
        Vocabulary.parse("old => patient.age >")


W = make_token("w", ("writer",))


@pytest.fixture
def store():
    s = Store("st-a", KEY, None, clock=lambda: NOW)
    s.add_image(sample_dicom("P1", age=60, hrt=True), W)
    s.add_image(sample_dicom("P2", age=45, hrt=True), W)
    s.add_image(sample_dicom("P3", age=70, hrt=False, sex="M"), W)
    s.add_episode({"patient": "st-a/pat/1", "laterality": "L", "diagnosis": "cancer", "therapy_outcome": "successful",
                   "date": "1999-01-01", "therapy_end_date": "1999-05-01"}, W)
    s.add_episode({"patient": "st-a/pat/1", "laterality": "R", "diagnosis": "cancer", "therapy_outcome": "none",
                   "date": "2001-01-01"}, W)
    s.add_episode({"patient": "st-a/pat/2", "laterality": "L", "diagnosis": "benign", "date": "2000-01-01"}, W)
    return s


def gids(rs):
    return [str(g) for g in rs.gids()]


def test_eval_first_query(store):
    rs = eval_local(translate(Q1, Vocabulary.default()), store, QID)
    assert gids(rs) == ["st-a/img/1"]
    assert dict(rs.records[GlobalId.parse("st-a/img/1")])["patient.age"] == "60"


def test_eval_second_query(store):
    assert gids(eval_local(translate(Q2, Vocabulary.default()), store)) == ["st-a/pat/1"]


def test_unknown_is_not_true(store):
    # patient 2's only episode has no therapy_end_date: comparison is UNKNOWN
    q = parse_formal('FIND PATIENTS WHERE EXISTS EPISODE e (e.therapy_end_date > "1990-01-01")')
    assert gids(eval_local(q, store)) == ["st-a/pat/1"]
    q = parse_formal('FIND PATIENTS WHERE NOT EXISTS EPISODE e (e.therapy_end_date > "1990-01-01")')
    # pat/2: NOT UNKNOWN = UNKNOWN (excluded); pat/3: no episodes, EXISTS is FALSE
    assert gids(eval_local(q, store)) == ["st-a/pat/3"]
    q = parse_formal('FIND PATIENTS WHERE EXISTS EPISODE e (e.therapy_end_date > "1990-01-01" OR e.diagnosis = "benign")')
    assert gids(eval_local(q, store)) == ["st-a/pat/1", "st-a/pat/2"]


def test_image_projection_includes_referenced_algs(store):
    store.set_derived(GlobalId.parse("st-a/img/1"), "m", 2.5)
    rs = eval_local(parse_formal("FIND IMAGES WHERE alg.m.value >= 2"), store)
    assert list(rs.records) == [GlobalId.parse("st-a/img/1")]
    assert rs.records[GlobalId.parse("st-a/img/1")][-1] == ("alg.m.value", "2.5")


def test_empty_resultset_golden():
    raw = resultset_xml(ResultSet("0" * 32, "st-a"))
    assert raw == b'<resultset query="00000000000000000000000000000000" site="st-a"/>'
    frame = bytes.fromhex((FIXTURES / "empty_resultset.hex").read_text().strip())
    assert frame[8:] == raw


@settings(max_examples=150)
@given(result_sets())
def test_xml_roundtrip_and_schema(rs):
    raw = resultset_xml(rs)
    SCHEMA.assertValid(etree.fromstring(raw))
    back = xml_resultset(raw)
    assert (back.query_id, back.site, back.records, back.warnings) == (rs.query_id, rs.site, rs.records, rs.warnings)


@pytest.mark.parametrize(
    "raw,where",
    [
        (b'<resultset query="zz" site="st-a"/>', "/resultset/@query"),
        (b'<resultset query="%s" site="st-a"><record gid="st-a/img/1"><g/></record></resultset>' % QID.encode(),
         "/resultset/record[1]/g[1]"),
        (b'<resultset query="%s" site="st-a"><record gid="st-a/img/1"/><warning>x</warning></resultset>' % QID.encode(),
         "/resultset/warning[2]"),
        (b'<resultset query="%s" site="st-a"><record gid="st-a/img/1"/><record gid="st-a/img/1"/></resultset>'
         % QID.encode(), "/resultset/record[2]"),
        (b'<results query="x" site="y"/>', "/resultset"),
        (b"<resultset", "malformed"),
    ],
)
def test_schema_errors_name_the_path(raw, where):
    with pytest.raises(SchemaError, match=where.replace("[", r"\[").replace("]", r"\]")):
        xml_resultset(raw)


UNIVERSE = {
    GlobalId("st-a", "img", i): (("image.gid", f"st-a/img/{i}"), ("patient.age", str(40 + i))) for i in range(1, 8)
}
parts = result_sets(universe=UNIVERSE, query_id=QID)


def _view(rs):
    return rs.query_id, rs.records, rs.warnings


@given(parts, parts)
def test_merge_commutative(a, b):
    assert _view(merge_results([a, b])) == _view(merge_results([b, a]))


@given(parts, parts, parts)
def test_merge_associative(a, b, c):
    left = merge_results([merge_results([a, b]), c])
    right = merge_results([a, merge_results([b, c])])
    assert _view(left) == _view(right)


@given(parts)
def test_merge_idempotent(a):
    once = merge_results([a])
    assert _view(merge_results([a, a])) == _view(once)
    assert once.records == a.records


def test_merge_rejects_mismatch():
    a = ResultSet(QID, "st-a", {GlobalId("st-a", "img", 1): (("x", "1"),)})
    with pytest.raises(MergeError):
        merge_results([a, ResultSet("f" * 32, "st-b")])
    with pytest.raises(MergeError):
        merge_results([a, ResultSet(QID, "st-b", {GlobalId("st-a", "img", 1): (("x", "2"),)})])
    with pytest.raises(MergeError):
        merge_results([])


@lru_cache(maxsize=1)
def _sim_store():
    fed = Federation(clique(["site-1"]), 3)
    fed.load(generate(60, 3))
    return fed.nodes["site-1"].store


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_random_queries_match_oracle_locally(seed):
    store = _sim_store()
    q = random_query(random.Random(seed))
    assert eval_local(q, store).records == oracle_answer(q, [store.snapshot()])
