"""Grounded chain-of-thought instruction items: synthesis and parsing."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .geometry import BinBox, BinRangeError, to_bins
from .grounding import GroundedObject, GroundedSet
from .scene_gate import ABNORMAL, EVENTS, NORMAL

log = logging.getLogger(__name__)

# The anomaly-aware user question paired with every item.
ANOMALY_QUESTION = (
    "You are a surveillance video analysis expert. Classify the video as Normal or Abnormal "
    "strictly using visual evidence. You MUST end your response with 'Answer: Abnormal' or "
    "'Answer: Normal'."
)

COT_TEMPLATE = """\
You are analyzing a surveillance video. The following objects were detected:

{object_context}

Temporal Annotations: {annotations_text}

Coordinates are normalized to [0, 1000] where (0,0) is top-left and (1000,1000) is bottom-right.

The video is labeled: {label}

Write a chain-of-thought analysis. Do NOT start with "Let me analyze this video" — that prefix will be added automatically.

Structure:
- Observations: Describe 2–3 key behaviors you observe, referencing object locations with bounding box coordinates [x1, y1, x2, y2] in [0, 1000] range where available.
- Analysis: Explain your reasoning for classifying this video as {label} with specific details from the observations.
- End with exactly: Answer: {label}

IMPORTANT: Write as if you are directly watching the video. Use phrases like "In the video, I observe..." — do NOT reference temporal annotations, context, input, or any information source. Everything must sound like first-person visual observation.

Be specific and grounded in the detected objects. 3–5 sentences total.
"""

ANALYSIS_PREFIX = "Let me analyze this video."

DETECTION_LINE = "DETECTED: {label} {box} ({event})"
_DETECTION_RE = re.compile(
    r"^DETECTED: (?P<label>.+?) \[(?P<b>\s*\d+\s*,\s*\d+\s*,\s*\d+\s*,\s*\d+\s*)\] \((?P<event>Normal|Abnormal)\)\s*$",
    re.M,
)


class CoTParseError(ValueError):
    pass


class SynthesisRejected(RuntimeError):
    pass


@dataclass
class InstructionItem:
    subclip_id: str
    label: str
    user_prompt: str
    assistant_response: str

    def __post_init__(self) -> None:
        if self.label not in EVENTS:
            raise ValueError(f"label must be Normal/Abnormal, got {self.label!r}")

    def to_dict(self) -> dict:
        return {"subclip_id": self.subclip_id, "label": self.label, "user": self.user_prompt, "assistant": self.assistant_response}

    @classmethod
    def from_dict(cls, d: Mapping) -> "InstructionItem":
        return cls(d["subclip_id"], d["label"], d["user"], d["assistant"])


@dataclass
class ParsedCoT:
    observations: str
    analysis: str
    answer: str
    boxes: list[tuple[str | None, BinBox]] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)


def _canonical(objects: Sequence[GroundedObject]) -> list[GroundedObject]:
    return sorted(objects, key=lambda o: (o.annotation.event != ABNORMAL, -o.annotation.confidence, o.annotation.label))


def _quote(reason: str) -> str:
    return '"' + reason.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_object_context(grounded: GroundedSet | Sequence[GroundedObject]) -> str:
    objects = grounded.objects if isinstance(grounded, GroundedSet) else list(grounded)
    lines = []
    for o in _canonical(objects):
        a = o.annotation
        where = f" at {to_bins(o.box).render()}" if o.box is not None else ""
        lines.append(f"- {a.label}{where}: {_quote(a.reason)} ({a.event})")
    return "\n".join(lines)


def build_cot_prompt(object_context: str, annotations_text: str, label: str) -> str:
    return COT_TEMPLATE.format(object_context=object_context, annotations_text=annotations_text, label=label)


def detection_block(grounded: GroundedSet | Sequence[GroundedObject]) -> str:
    objects = grounded.objects if isinstance(grounded, GroundedSet) else list(grounded)
    return "\n".join(
        DETECTION_LINE.format(label=o.annotation.label, box=to_bins(o.box).render(), event=o.annotation.event)
        for o in _canonical(objects)
        if o.box is not None
    )


_TRAILING_ANSWER = re.compile(r"answer\s*:\s*\**\s*(normal|abnormal)\s*\**\s*\.?\s*$", re.I)


def ends_with_answer(text: str, label: str) -> bool:
    m = _TRAILING_ANSWER.search(text.strip())
    return bool(m) and m.group(1).lower() == label.lower()


def assemble_response(block: str, cot_text: str) -> str:
    body = cot_text.strip()
    if body.startswith(ANALYSIS_PREFIX):
        body = body[len(ANALYSIS_PREFIX):].lstrip()
    head = f"{block}\n\n" if block else ""
    return f"{head}{ANALYSIS_PREFIX}\n\n{body}"


def synthesize(
    media_ref: str,
    grounded: GroundedSet,
    annotations_text: str,
    label: str,
    vlm,
    retries: int = 2,
    decode: Mapping | None = None,
) -> InstructionItem:
    """Build one instruction item: user question plus the deterministic
    detection block followed by the generated reasoning.

    Raises :class:`SynthesisRejected` when no attempt ends with the expected
    ``Answer: {label}`` line.
    """
    if label not in EVENTS:
        raise ValueError(f"label must be Normal/Abnormal, got {label!r}")
    prompt = build_cot_prompt(format_object_context(grounded), annotations_text, label)
    block = detection_block(grounded)
    last = ""
    for attempt in range(retries + 1):
        text = vlm.generate(media_ref, prompt, dict(decode or {})).text
        last = text
        if ends_with_answer(text, label):
            return InstructionItem(grounded.subclip_id, label, ANOMALY_QUESTION, assemble_response(block, text))
        log.info("CoT for %s lacks 'Answer: %s' (attempt %d)", grounded.subclip_id, label, attempt + 1)
    tail = last.strip()[-60:]
    raise SynthesisRejected(f"{grounded.subclip_id}: response does not end with 'Answer: {label}' (tail: {tail!r})")


# -- parsing ---------------------------------------------------------------

_HEADER = {name: re.compile(rf"\**\s*{name}\s*\**\s*:\s*\**", re.I) for name in ("observations", "analysis", "answer")}
_BRACKET = re.compile(r"\[([^\[\]\n]*)\]")
_INT = re.compile(r"[+-]?\d+")
_NUM = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")
_WORDS_TAIL = re.compile(r"([A-Za-z][A-Za-z' -]*)$")
_FILLER = {
    "a", "an", "the", "at", "in", "on", "of", "is", "are", "with", "near", "located", "positioned",
    "bounding", "box", "boxes", "coordinates", "coordinate", "region", "area", "its", "their", "his", "her",
    "and", "to", "by", "from",
}
LABEL_WINDOW = 60


def _find_header(text: str, name: str, start: int):
    return _HEADER[name].search(text, start)


def _nearest_label(text: str, pos: int) -> str | None:
    window = text[max(0, pos - LABEL_WINDOW):pos]
    m = _WORDS_TAIL.search(window.rstrip())
    if not m:
        return None
    words = m.group(1).replace("-", " ").split()
    while words and words[-1].lower() in _FILLER:
        words.pop()
    if not words:
        return None
    w = words[-1].lower()
    if w.endswith("'s"):
        w = w[:-2]
    w = w.strip("'")
    return w or None


def _extract_boxes(text: str) -> tuple[list[tuple[str | None, BinBox]], list[dict]]:
    boxes: list[tuple[str | None, BinBox]] = []
    skipped: list[dict] = []
    block_labels = {m.start("b") - 1: m.group("label") for m in _DETECTION_RE.finditer(text)}
    for m in _BRACKET.finditer(text):
        parts = [p.strip() for p in m.group(1).split(",")]
        if len(parts) != 4 or not all(_NUM.fullmatch(p) for p in parts):
            continue  # not a coordinate tuple
        if not all(_INT.fullmatch(p) for p in parts):
            skipped.append({"offset": m.start(), "text": m.group(0), "error": "non-integer coordinate"})
            continue
        try:
            bb = BinBox.of([int(p) for p in parts])
        except BinRangeError as exc:
            skipped.append({"offset": m.start(), "text": m.group(0), "error": str(exc)})
            continue
        label = block_labels.get(m.start())
        if label is None:
            label = _nearest_label(text, m.start())
        boxes.append((label, bb))
    return boxes, skipped


def _answer_token(segment: str) -> str:
    m = re.match(r"[\s*_`\"']*(abnormal|normal)\b", segment, re.I)
    if not m:
        raise CoTParseError(f"answer is neither Normal nor Abnormal: {segment[:40]!r}")
    return ABNORMAL if m.group(1).lower() == "abnormal" else NORMAL


def parse_cot(text: str) -> ParsedCoT:
    """Split a grounded CoT into its sections and pull out every box.

    Headers are matched case-insensitively, first occurrence each and in
    order. Bracketed integer 4-tuples anywhere in the text become boxes;
    tuples outside the bin range are skipped and recorded.
    """
    obs = _find_header(text, "observations", 0)
    pos = obs.end() if obs else 0
    ana = _find_header(text, "analysis", pos)
    pos = ana.end() if ana else pos
    ans = _find_header(text, "answer", pos)
    if ans is None:
        raise CoTParseError("missing Answer section")

    def section(h, nxt) -> str:
        if h is None:
            return ""
        end = nxt.start() if nxt is not None else len(text)
        return text[h.end():end].strip().strip("*").strip()

    observations = section(obs, ana or ans)
    analysis = section(ana, ans)
    answer = _answer_token(text[ans.end():])
    boxes, skipped = _extract_boxes(text)
    return ParsedCoT(observations, analysis, answer, boxes, skipped)


# -- baseline verdict heuristics ----------------------------------------------

UNKNOWN = "Unknown"
_NEGATORS = {"no", "not", "nothing", "without", "never", "none", "isn't", "aren't", "wasn't", "weren't",
             "doesn't", "don't", "didn't", "cannot", "can't", "n't", "neither", "nor"}
_FALLBACK_STEMS = ("anomal", "unusual", "suspicious")
_VIOLENCE_TERMS = ("violen", "fight", "weapon", "gun", "assault", "attack", "crime", "shoot", "robbery", "fire", "accident")
_WORD = re.compile(r"[a-z]+(?:'[a-z]+)?")
_WHICH = re.compile(r"<which>\s*(.*?)\s*</which>", re.I | re.S)


def _negated(words: list[str], i: int, span: int = 3) -> bool:
    return any(w in _NEGATORS for w in words[max(0, i - span):i])


def _keyword_verdict(words: list[str], explicit: tuple[str, ...]) -> str:
    for i, w in enumerate(words):
        if w not in explicit:
            continue
        if w == "yes":
            return ABNORMAL
        if w == "no":
            return NORMAL
        if w == "normal":
            return NORMAL
        if w == "abnormal":
            return NORMAL if _negated(words, i) else ABNORMAL
    return UNKNOWN


def _stem_verdict(words: list[str], stems: tuple[str, ...]) -> str:
    for i, w in enumerate(words):
        if any(w.startswith(s) for s in stems) and not _negated(words, i):
            return ABNORMAL
    return UNKNOWN


def parse_verdict(text, profile: str = "keyword_priority") -> str:
    """Map a free-text baseline answer to Normal / Abnormal / Unknown.

    Never raises on content; an unknown profile is a programming error.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = str(text)
    if profile == "xml_which":
        m = _WHICH.search(text)
        if not m:
            return UNKNOWN
        return _keyword_verdict(_WORD.findall(m.group(1).lower()), ("abnormal", "normal"))
    if profile == "keyword_priority":
        words = _WORD.findall(text.lower())
        v = _keyword_verdict(words, ("yes", "no", "abnormal", "normal"))
        return v if v != UNKNOWN else _stem_verdict(words, _FALLBACK_STEMS)
    if profile == "first80":
        head = _WORD.findall(text[:80].lower())
        v = _keyword_verdict(head, ("yes", "no", "abnormal", "normal"))
        if v != UNKNOWN:
            return v
        return _stem_verdict(_WORD.findall(text.lower()), _FALLBACK_STEMS + _VIOLENCE_TERMS)
    raise ValueError(f"unknown verdict profile {profile!r}")


def window_score(verdicts: Sequence[str]) -> float:
    """Fraction of windows judged Abnormal."""
    if not verdicts:
        return 0.0
    return sum(v == ABNORMAL for v in verdicts) / len(verdicts)
