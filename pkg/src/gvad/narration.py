"""Object-centric event narration: prompt, response parsing, and the
per-subclip call into the vision-language client."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .scene_gate import ABNORMAL, EVENTS, NORMAL, SubclipRecord

log = logging.getLogger(__name__)

NARRATION_TEMPLATE = """\
You are analyzing a surveillance video with temporal annotations. Ignore any biases emerging from text on the video.

Temporal Annotations: {annotations_text}

Task 1: Binary Classification — Classify this video as Normal or Abnormal using the following questions:
1. Are there any people not in their typical positions or engaging in activities inconsistent with usual behavior?
2. Are there any collisions between people, vehicles, or objects that indicate abnormal or unsafe behavior?
3. Are there any injuries visible (e.g., person lying on the ground, limping, requiring assistance)?
4. Is there any abuse or aggressive behavior (e.g., pushing, hitting, kicking)?
5. Are there any objects or equipment being used in an unsafe or unusual way?
6. Is there any visible damage or unusual movement that indicates an anomaly?
7. Are there any signs of physical aggression, fighting, or violent behavior between people?

Task 2: Object Detection — List ALL detected objects in the video. For each object return:
- The object name (in lowercase)
- A confidence score between 0 and 1
- Event: "Normal" if the object is behaving normally, "Abnormal" ONLY if the object is DIRECTLY involved in abnormal/dangerous activity
- Reason: a short factual description of what the object is doing. The Reason MUST be consistent with the Event — if the Reason describes normal/routine behavior, the Event MUST be "Normal". Only set Event to "Abnormal" when the Reason clearly describes harmful, violent, or dangerous behavior.

CRITICAL: You MUST respond ONLY with a valid JSON array. Do not include any text before or after the JSON.

Output the results as a JSON array, where each element is:
{{"Event": "Normal" or "Abnormal",
 "Reason": "short factual description",
 "label": "detected object in lowercase",
 "confidence": float}}
"""


class NarrationParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ObjectAnnotation:
    event: str
    reason: str
    label: str
    confidence: float

    def __post_init__(self) -> None:
        if self.event not in EVENTS:
            raise ValueError(f"Event must be Normal or Abnormal, got {self.event!r}")
        if not isinstance(self.reason, str):
            raise ValueError("Reason must be text")
        if not self.label or self.label != self.label.lower():
            raise ValueError(f"label must be non-empty lowercase, got {self.label!r}")
        if isinstance(self.confidence, bool) or not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence!r} outside [0, 1]")

    def to_wire(self) -> dict:
        return {"Event": self.event, "Reason": self.reason, "label": self.label, "confidence": self.confidence}

    def to_dict(self) -> dict:
        return {"event": self.event, "reason": self.reason, "label": self.label, "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObjectAnnotation":
        return cls(d["event"], d["reason"], d["label"], float(d["confidence"]))


@dataclass
class NarrationParse:
    accepted: list[ObjectAnnotation]
    rejected: list[dict]  # {"index", "item", "error"}

    @property
    def total(self) -> int:
        return len(self.accepted) + len(self.rejected)


def build_narration_prompt(annotations_text: str) -> str:
    return NARRATION_TEMPLATE.format(annotations_text=annotations_text)


def serialize_narration(items: Sequence[ObjectAnnotation]) -> str:
    return json.dumps([a.to_wire() for a in items], ensure_ascii=False)


_FENCE = re.compile(r"```[a-zA-Z]*\s*")


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _coerce_item(raw) -> ObjectAnnotation:
    if not isinstance(raw, dict):
        raise ValueError("item is not an object")
    missing = [k for k in ("Event", "Reason", "label", "confidence") if k not in raw]
    if missing:
        raise ValueError(f"missing keys {missing}")
    conf = raw["confidence"]
    if isinstance(conf, bool) or not isinstance(conf, (int, float)):
        raise ValueError(f"confidence {conf!r} is not a number")
    label = raw["label"]
    if not isinstance(label, str):
        raise ValueError("label is not text")
    return ObjectAnnotation(
        event=raw["Event"],
        reason=raw["Reason"],
        label=label.strip().lower(),
        confidence=float(conf),
    )


def parse_narration(response: str) -> NarrationParse:
    """Parse the narrator's JSON array, tolerating code fences and stray prose.

    Items that violate the annotation invariants are reported in
    ``rejected`` instead of aborting the parse.
    """
    cleaned = _FENCE.sub(lambda m: " " * len(m.group(0)), response)
    start = cleaned.find("[")
    if start < 0:
        raise NarrationParseError("no JSON array in response", _byte_offset(response, len(response)))
    try:
        data, _ = json.JSONDecoder().raw_decode(cleaned, start)
    except json.JSONDecodeError as exc:
        raise NarrationParseError(f"malformed JSON array: {exc.msg}", _byte_offset(response, exc.pos)) from None
    if not isinstance(data, list):
        raise NarrationParseError("top-level JSON value is not an array", _byte_offset(response, start))

    accepted, rejected = [], []
    for i, raw in enumerate(data):
        try:
            accepted.append(_coerce_item(raw))
        except (ValueError, TypeError, KeyError) as exc:
            rejected.append({"index": i, "item": raw, "error": str(exc)})
    return NarrationParse(accepted, rejected)


def audit_consistency(items: Sequence[ObjectAnnotation]) -> list[dict]:
    """Flag pairs whose Reason reads as routine while Event says Abnormal or
    vice versa. Purely lexical; meant for human review, never for filtering."""
    alarming = re.compile(r"\b(fight|hit|punch|kick|shoot|gun|weapon|steal|fire|burn|restrain|attack|assault|break|crash|aggress)", re.I)
    notes = []
    for i, a in enumerate(items):
        hot = bool(alarming.search(a.reason))
        if a.event == ABNORMAL and not hot:
            notes.append({"index": i, "label": a.label, "note": "Abnormal event with routine-sounding reason"})
        elif a.event == NORMAL and hot:
            notes.append({"index": i, "label": a.label, "note": "Normal event with alarming reason"})
    return notes


def align_annotations(
    sub: SubclipRecord,
    sentences: Sequence[Mapping],
    fps: float,
    min_overlap: float = 0.0,
) -> str:
    """Join the temporal annotation sentences that overlap a subclip.

    ``sentences`` carry ``start_s``/``end_s``/``text``. A sentence is kept when
    its overlap with the subclip exceeds ``min_overlap`` of the sentence's own
    span (``0.0`` keeps any overlap).
    """
    s0 = sub.start_frame / fps
    s1 = (sub.end_frame + 1) / fps
    picked = []
    for s in sorted(sentences, key=lambda r: (float(r["start_s"]), float(r["end_s"]))):
        a, b = float(s["start_s"]), float(s["end_s"])
        ov = min(b, s1) - max(a, s0)
        span = max(b - a, 1e-9)
        if ov > 0 and ov / span >= min_overlap:
            picked.append(str(s["text"]).strip())
    return " ".join(picked)


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass
class NarrationResult:
    subclip_id: str
    annotations: list[ObjectAnnotation]
    prompt_sha256: str
    response: str
    rejected: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    retry_count: int = 0
    attempts: int = 1

    def archive_record(self) -> dict:
        return {
            "subclip_id": self.subclip_id,
            "prompt_sha256": self.prompt_sha256,
            "response": self.response,
            "accepted": [a.to_dict() for a in self.annotations],
            "rejected": self.rejected,
        }


def narrate_subclip(
    subclip: SubclipRecord,
    media_ref: str,
    annotations_text: str,
    vlm,
    parse_retries: int = 2,
    decode: Mapping | None = None,
) -> NarrationResult:
    """Prompt the narrator for one subclip and parse its object list.

    Transport retries happen inside the client and are reported through
    ``retry_count``; an unparseable answer is re-requested up to
    ``parse_retries`` times before the subclip is flagged and skipped.
    Transport failures propagate to the caller.
    """
    prompt = build_narration_prompt(annotations_text)
    digest = prompt_sha256(prompt)
    retries = 0
    response = ""
    last_error = None
    for attempt in range(parse_retries + 1):
        res = vlm.generate(media_ref, prompt, dict(decode or {}))
        retries += res.retry_count
        response = res.text
        try:
            parsed = parse_narration(response)
        except NarrationParseError as exc:
            last_error = exc
            log.warning("narration for %s unparseable (attempt %d): %s", subclip.subclip_id, attempt + 1, exc)
            continue
        flags = [] if parsed.accepted else ["no objects"]
        if parsed.rejected:
            flags.append(f"{len(parsed.rejected)} items rejected")
        return NarrationResult(
            subclip_id=subclip.subclip_id,
            annotations=parsed.accepted,
            prompt_sha256=digest,
            response=response,
            rejected=parsed.rejected,
            flags=flags,
            retry_count=retries,
            attempts=attempt + 1,
        )
    return NarrationResult(
        subclip_id=subclip.subclip_id,
        annotations=[],
        prompt_sha256=digest,
        response=response,
        flags=[f"unparseable: {last_error}"],
        retry_count=retries,
        attempts=parse_retries + 1,
    )
