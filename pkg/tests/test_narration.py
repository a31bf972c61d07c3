from __future__ import annotations

import json

import pytest
from conftest import FIXTURES, delatex, normalize
from hypothesis import given, settings
from hypothesis import strategies as st

from gvad.clients import MockVLM, TransportError, _mock_endpoint
from gvad.narration import (
    NarrationParseError,
    ObjectAnnotation,
    align_annotations,
    audit_consistency,
    build_narration_prompt,
    narrate_subclip,
    parse_narration,
    prompt_sha256,
    serialize_narration,
)
from gvad.scene_gate import SubclipRecord
from gvad.synthetic import ARREST_NARRATION

SUB = SubclipRecord("Arrest001", 0, 299, "Abnormal")


def test_prompt_matches_source_wording():
    source = delatex((FIXTURES / "narration_prompt.tex").read_text())
    assert normalize(build_narration_prompt("{annotations_text}")) == normalize(source)


def test_prompt_golden_file():
    golden = (FIXTURES / "narration_prompt.golden.txt").read_text()
    text = "A man in a white shirt climbs a ladder. Two men wrestle near the wall."
    assert build_narration_prompt(text) == golden


def test_prompt_slots():
    empty = build_narration_prompt("")
    assert "Temporal Annotations: \n" in empty
    one = build_narration_prompt("A man enters.")
    assert "Temporal Annotations: A man enters.\n" in one
    assert one.count("?") == 7  # the seven classification questions


def test_parse_example():
    resp = '[{"Event":"Abnormal","Reason":"physically restraining another man","label":"man","confidence":0.93}]'
    p = parse_narration(resp)
    assert p.accepted == [ObjectAnnotation("Abnormal", "physically restraining another man", "man", 0.93)]
    assert p.rejected == []


def test_parse_empty_array():
    p = parse_narration("[]")
    assert p.accepted == [] and p.total == 0


def test_parse_rejects_bad_confidence_keeps_rest():
    items = json.loads(ARREST_NARRATION)
    items.insert(1, {"Event": "Normal", "Reason": "x", "label": "cup", "confidence": 1.4})
    p = parse_narration(json.dumps(items))
    assert len(p.accepted) == len(items) - 1
    assert [r["index"] for r in p.rejected] == [1]
    assert p.total == len(items)


@pytest.mark.parametrize(
    "wrapped",
    [
        "```json\n{}\n```",
        "  {}  ",
        "Here you go:\n{}\nThanks.",
        "```\n{}```",
    ],
)
def test_parse_tolerates_fences_and_prose(wrapped):
    p = parse_narration(wrapped.format(ARREST_NARRATION))
    assert len(p.accepted) == 5


def test_parse_lowercases_labels():
    p = parse_narration('[{"Event":"Normal","Reason":"parked","label":" Car ","confidence":0.5}]')
    assert p.accepted[0].label == "car"


@pytest.mark.parametrize(
    "item",
    [
        {"Event": "Weird", "Reason": "r", "label": "a", "confidence": 0.5},
        {"Event": "Normal", "Reason": "r", "label": "", "confidence": 0.5},
        {"Event": "Normal", "Reason": "r", "label": "a", "confidence": "high"},
        {"Event": "Normal", "Reason": "r", "label": "a", "confidence": True},
        {"Event": "Normal", "label": "a", "confidence": 0.5},
        "not an object",
    ],
)
def test_parse_item_violations_are_collected(item):
    p = parse_narration(json.dumps([item]))
    assert p.accepted == [] and len(p.rejected) == 1


@pytest.mark.parametrize(
    "resp, offset",
    [("no array here", 13), ('[{"Event": "Normal",', None), ("é {}", 5), ('["é", }]', 7)],
)
def test_parse_errors_report_byte_offset(resp, offset):
    with pytest.raises(NarrationParseError) as ei:
        parse_narration(resp)
    if offset is not None:
        assert ei.value.offset == offset


annotations = st.builds(
    ObjectAnnotation,
    event=st.sampled_from(["Normal", "Abnormal"]),
    reason=st.text(max_size=40),
    label=st.text(st.characters(whitelist_categories=("Ll",)), min_size=1, max_size=12),
    confidence=st.floats(0, 1),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(annotations, max_size=8))
def test_serialize_parse_round_trip(items):
    p = parse_narration(serialize_narration(items))
    assert p.accepted == items
    assert p.total == len(items)


def test_align_annotations_overlap():
    sents = [
        {"start_s": 0.0, "end_s": 2.0, "text": "A man walks in."},
        {"start_s": 9.0, "end_s": 12.0, "text": "He leaves."},
        {"start_s": 30.0, "end_s": 31.0, "text": "Later."},
    ]
    sub = SubclipRecord("v", 0, 299)  # 0 .. 10 s at 30 fps
    assert align_annotations(sub, sents, 30) == "A man walks in. He leaves."
    assert align_annotations(sub, sents, 30, min_overlap=0.5) == "A man walks in."


def test_audit_flags_inconsistent_pairs():
    items = [
        ObjectAnnotation("Abnormal", "standing still", "man", 0.9),
        ObjectAnnotation("Normal", "punching a man", "man", 0.9),
        ObjectAnnotation("Abnormal", "punching a man", "man", 0.9),
    ]
    assert [n["index"] for n in audit_consistency(items)] == [0, 1]


def vlm(**kw):
    return MockVLM(endpoint=_mock_endpoint(max_retries=3), **kw)


def test_narrate_with_fixture():
    res = narrate_subclip(SUB, "clip://a", "text", vlm(fixtures={"clip://a": ARREST_NARRATION}))
    assert [a.label for a in res.annotations] == ["man", "man", "ladder", "floor", "wall"]
    assert res.flags == []
    assert res.prompt_sha256 == prompt_sha256(build_narration_prompt("text"))
    rec = res.archive_record()
    assert rec["response"] == ARREST_NARRATION and len(rec["accepted"]) == 5


def test_narrate_empty_array_flags_subclip():
    res = narrate_subclip(SUB, "clip://a", "", vlm(fixtures={"clip://a": "[]"}))
    assert res.annotations == [] and res.flags == ["no objects"]


def test_narrate_retry_count_after_timeouts():
    res = narrate_subclip(SUB, "clip://a", "", vlm(fixtures={"clip://a": ARREST_NARRATION}, failures=["timeout", "timeout"]))
    assert res.retry_count == 2 and len(res.annotations) == 5


def test_narrate_unparseable_is_flagged_not_raised():
    client = vlm(fixtures={"clip://a": "I cannot help with that."})
    res = narrate_subclip(SUB, "clip://a", "", client, parse_retries=2)
    assert res.annotations == [] and res.attempts == 3
    assert any("unparseable" in f for f in res.flags)
    assert client.calls == 3


def test_narrate_transport_failure_propagates():
    with pytest.raises(TransportError):
        narrate_subclip(SUB, "clip://a", "", vlm(failures=["timeout"] * 4))
