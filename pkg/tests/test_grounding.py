from __future__ import annotations

import pytest

from gvad.clients import DetectorClient, DetectorRequest, ProtocolError, _mock_endpoint
from gvad.geometry import Box, area_fraction, iou, label_match
from gvad.grounding import (
    GroundedObject,
    GroundedSet,
    GroundingConfig,
    candidate_frames,
    frame_ref,
    ground_frame,
    ground_subclip,
    grounding_rate,
)
from gvad.narration import ObjectAnnotation
from gvad.scene_gate import SubclipRecord

MAN1 = ObjectAnnotation("Abnormal", "physically restraining another man", "man", 0.93)
MAN2 = ObjectAnnotation("Abnormal", "aggressive posture", "man", 0.9)
LADDER = ObjectAnnotation("Normal", "stationary against the wall", "ladder", 0.85)
WALL = ObjectAnnotation("Normal", "background", "wall", 0.6)

A = [0.10, 0.10, 0.50, 0.50]
A2 = [0.10, 0.10, 0.50, 0.46]  # IoU(A, A2) = 0.9
B = [0.60, 0.55, 0.75, 0.90]
L = [0.66, 0.13, 0.80, 0.45]


class ScriptedDetector(DetectorClient):
    """Answers from ``script(image, queries) -> list of raw detections``."""

    def __init__(self, script, fail_frames=()):
        super().__init__(_mock_endpoint(max_retries=0))
        self.script = script
        self.fail_frames = set(fail_frames)
        self.requests: list[dict] = []

    def _send(self, payload):
        self.requests.append(payload)
        frame = int(payload["image"].rsplit("=", 1)[1])
        if frame in self.fail_frames:
            raise ProtocolError("detector: HTTP 500")
        return {"detections": self.script(frame, payload["queries"])}


def d(label, box, conf, q=0):
    return {"label": label, "box": box, "confidence": conf, "query_index": q}


def arrest_script(frame, queries):
    if queries[0] == "man":
        return [d("man", A, 0.9), d("man", A2, 0.8), d("man", B, 0.6), d("person", A, 0.7, q=1)]
    if queries[0] == "ladder":
        return [d("ladder", L, 0.8)]
    if queries[0] == "wall":
        return [d("wall", [0.0, 0.0, 1.0, 0.8], 0.9)]
    return []


@pytest.mark.parametrize(
    "sub, k, expected",
    [
        ((0, 600), 5, [600, 500, 400, 300, 200, 100]),
        ((10, 10), 5, [10]),
        ((0, 3), 5, [3, 2, 1]),
        ((0, 600), 0, [600]),
    ],
)
def test_candidate_frames(sub, k, expected):
    assert candidate_frames(SubclipRecord("v", *sub), GroundingConfig(fallback_frames=k)) == expected


def test_candidate_frames_invariants():
    for s in range(0, 40, 7):
        for e in range(s, s + 200, 13):
            fr = candidate_frames(SubclipRecord("v", s, e))
            assert fr[0] == e
            assert len(set(fr)) == len(fr) <= 6
            assert all(s <= f <= e for f in fr)
            assert fr == sorted(fr, reverse=True)


def test_ground_frame_dedups_two_men():
    det = ScriptedDetector(arrest_script)
    fg = ground_frame("img#frame=9", 9, [MAN1, MAN2, LADDER], det)
    assert fg.count == 3
    assert fg.boxes[0].box == Box.of(A)
    assert fg.boxes[1].box == Box.of(B)
    assert fg.boxes[2].box == Box.of(L)
    assert fg.label_rejected == 2  # the reason-triggered "person" hit for each man


def test_both_queries_sent_jointly():
    det = ScriptedDetector(arrest_script)
    ground_frame("img#frame=9", 9, [MAN1], det, GroundingConfig(box_threshold=0.3))
    assert det.requests == [
        {"image": "img#frame=9", "queries": ["man", "physically restraining another man"], "box_threshold": 0.3}
    ]


def test_scene_level_box_removed_after_assignment():
    fg = ground_frame("img#frame=1", 1, [WALL, LADDER], ScriptedDetector(arrest_script))
    assert 0 not in fg.boxes and 1 in fg.boxes
    assert fg.area_rejected == 1


def test_no_detections():
    fg = ground_frame("img#frame=1", 1, [MAN1, LADDER], ScriptedDetector(lambda f, q: []))
    assert fg.count == 0 and fg.boxes == {}


def test_subclip_picks_frame_grounding_most():
    sub = SubclipRecord("v", 0, 600)

    def script(frame, queries):
        if frame == 600:
            return arrest_script(frame, queries) if queries[0] == "ladder" else []
        if frame == 400:
            return arrest_script(frame, queries)
        return []

    gs = ground_subclip(sub, "clip", [MAN1, MAN2, LADDER], ScriptedDetector(script))
    assert gs.anchor_frame == 400
    assert gs.grounded_count == 3
    assert gs.frames_evaluated == [600, 500, 400]  # stops once everything is grounded
    assert {o.anchor_frame for o in gs.objects} == {400}


def test_subclip_tie_keeps_latest_frame():
    sub = SubclipRecord("v", 0, 600)

    def script(frame, queries):
        return [d("ladder", L, 0.8)] if queries[0] == "ladder" and frame in (500, 300) else []

    gs = ground_subclip(sub, "clip", [MAN1, LADDER], ScriptedDetector(script))
    assert gs.anchor_frame == 500
    assert len(gs.frames_evaluated) == 6


def test_subclip_all_frames_fail():
    sub = SubclipRecord("v", 0, 600)
    det = ScriptedDetector(arrest_script, fail_frames=candidate_frames(sub))
    gs = ground_subclip(sub, "clip", [MAN1, LADDER], det)
    assert gs.anchor_frame == 600
    assert gs.grounded_count == 0
    assert gs.skipped_frames == [600, 500, 400, 300, 200, 100]


def test_subclip_zero_grounded_anchor_is_last_frame():
    gs = ground_subclip(SubclipRecord("v", 0, 600), "clip", [MAN1], ScriptedDetector(lambda f, q: []))
    assert gs.anchor_frame == 600 and gs.grounded_count == 0


def test_failed_frame_skipped_others_used():
    sub = SubclipRecord("v", 0, 600)
    gs = ground_subclip(sub, "clip", [LADDER], ScriptedDetector(arrest_script, fail_frames=[600]))
    assert gs.skipped_frames == [600] and gs.anchor_frame == 500


def test_grounded_set_invariants_and_round_trip():
    gs = ground_subclip(SubclipRecord("v", 0, 600), "clip", [MAN1, MAN2, LADDER, WALL], ScriptedDetector(arrest_script))
    boxed = [o for o in gs.objects if o.grounded]
    for o in boxed:
        assert area_fraction(o.box) <= 0.5
        assert o.anchor_frame == gs.anchor_frame
    for i in range(len(boxed)):
        for j in range(i + 1, len(boxed)):
            assert iou(boxed[i].box, boxed[j].box) <= 0.5
    back = GroundedSet.from_dict(gs.to_dict())
    assert [o.annotation for o in back.objects] == [o.annotation for o in gs.objects]
    assert [o.grounded for o in back.objects] == [o.grounded for o in gs.objects]


def test_detector_labels_match_annotation_labels():
    det = ScriptedDetector(arrest_script)
    fg = ground_frame("img#frame=1", 1, [MAN1, MAN2, LADDER], det)
    anns = [MAN1, MAN2, LADDER]
    for i, hit in fg.boxes.items():
        assert label_match(hit.label, anns[i].label)


def test_ground_subclip_is_deterministic():
    sub = SubclipRecord("v", 0, 600)
    a = ground_subclip(sub, "clip", [MAN1, MAN2, LADDER], ScriptedDetector(arrest_script)).to_dict()
    b = ground_subclip(sub, "clip", [MAN1, MAN2, LADDER], ScriptedDetector(arrest_script)).to_dict()
    assert a == b


def test_grounded_object_fields_together():
    with pytest.raises(ValueError):
        GroundedObject(MAN1, Box(0, 0, 0.1, 0.1), None, 3)


@pytest.mark.parametrize(
    "arg, expected", [((147_067, 159_008), 0.925), ((0, 7), 0.0), ((3, 4), 0.75), ((0, 0), 0.0)]
)
def test_grounding_rate(arg, expected):
    assert grounding_rate(arg) == pytest.approx(expected, abs=5e-4)


def test_frame_ref():
    assert frame_ref("synthetic://v", 12) == "synthetic://v#frame=12"


def test_detector_request_wire():
    assert DetectorRequest("i", ("a", "b"), 0.25).to_wire() == {"image": "i", "queries": ["a", "b"], "box_threshold": 0.25}


@pytest.mark.parametrize("kw", [{"box_threshold": 1.5}, {"dedup_iou": 0}, {"max_area_fraction": 0}, {"fallback_frames": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        GroundingConfig(**kw)
