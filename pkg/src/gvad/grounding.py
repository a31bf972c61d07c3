"""Anchor-frame spatial localization of narrated objects."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .clients import ClientError, DetectorRequest
from .geometry import Box, Detection, area_fraction, from_bins, greedy_dedup, label_match, to_bins
from .narration import ObjectAnnotation
from .scene_gate import SubclipRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundingConfig:
    box_threshold: float = 0.25
    dedup_iou: float = 0.5
    max_area_fraction: float = 0.5
    fallback_frames: int = 5

    def __post_init__(self) -> None:
        if not 0.0 <= self.box_threshold <= 1.0:
            raise ValueError("box_threshold must be in [0, 1]")
        if not 0.0 < self.dedup_iou <= 1.0:
            raise ValueError("dedup_iou must be in (0, 1]")
        if not 0.0 < self.max_area_fraction <= 1.0:
            raise ValueError("max_area_fraction must be in (0, 1]")
        if self.fallback_frames < 0:
            raise ValueError("fallback_frames must be >= 0")


@dataclass(frozen=True)
class GroundedObject:
    annotation: ObjectAnnotation
    box: Box | None = None
    det_confidence: float | None = None
    anchor_frame: int | None = None

    def __post_init__(self) -> None:
        present = [self.box is not None, self.det_confidence is not None, self.anchor_frame is not None]
        if any(present) and not all(present):
            raise ValueError("box, det_confidence and anchor_frame must be given together")

    @property
    def grounded(self) -> bool:
        return self.box is not None

    def to_dict(self) -> dict:
        a = self.annotation
        return {
            "label": a.label,
            "event": a.event,
            "reason": a.reason,
            "confidence": a.confidence,
            "bbox_2d": to_bins(self.box).as_list() if self.box is not None else None,
            "det_confidence": self.det_confidence,
        }


@dataclass
class GroundedSet:
    subclip_id: str
    anchor_frame: int
    objects: list[GroundedObject]
    frames_evaluated: list[int] = field(default_factory=list)
    skipped_frames: list[int] = field(default_factory=list)

    @property
    def grounded_count(self) -> int:
        return sum(o.grounded for o in self.objects)

    def to_dict(self) -> dict:
        return {
            "subclip_id": self.subclip_id,
            "anchor_frame": self.anchor_frame,
            "objects": [o.to_dict() for o in self.objects],
            "frames_evaluated": list(self.frames_evaluated),
            "skipped_frames": list(self.skipped_frames),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundedSet":
        objs = []
        for o in d["objects"]:
            ann = ObjectAnnotation(o["event"], o["reason"], o["label"], float(o["confidence"]))
            if o.get("bbox_2d") is None:
                objs.append(GroundedObject(ann))
            else:
                objs.append(GroundedObject(ann, from_bins(o["bbox_2d"]), float(o["det_confidence"]), int(d["anchor_frame"])))
        return cls(
            subclip_id=d["subclip_id"],
            anchor_frame=int(d["anchor_frame"]),
            objects=objs,
            frames_evaluated=list(d.get("frames_evaluated", [])),
            skipped_frames=list(d.get("skipped_frames", [])),
        )


@dataclass
class FrameGrounding:
    frame: int
    boxes: dict[int, Detection]  # object index -> assigned detection
    pooled: int = 0
    label_rejected: int = 0
    area_rejected: int = 0

    @property
    def count(self) -> int:
        return len(self.boxes)


def frame_ref(media_ref: str, frame: int) -> str:
    return f"{media_ref}#frame={frame}"


def candidate_frames(subclip: SubclipRecord, cfg: GroundingConfig | None = None) -> list[int]:
    """Last frame first, then up to ``fallback_frames`` evenly spaced earlier
    frames strictly inside the subclip, latest first."""
    cfg = cfg or GroundingConfig()
    s, e = subclip.start_frame, subclip.end_frame
    k = cfg.fallback_frames
    out = [e]
    span = e - s
    for i in range(k, 0, -1):
        # s + i * span / (k + 1), rounded half up in integer arithmetic
        f = s + (2 * i * span + (k + 1)) // (2 * (k + 1))
        if s < f < e and f not in out:
            out.append(f)
    return out


def ground_frame(
    image_ref: str,
    frame: int,
    annotations: Sequence[ObjectAnnotation],
    detector,
    cfg: GroundingConfig | None = None,
) -> FrameGrounding:
    """Ground all objects on one frame.

    Each object is queried with its label and its reason together; hits
    whose detector label does not substring-match the object label are
    dropped, the rest go through confidence-ordered deduplication, and
    oversized boxes are removed only after assignment.
    """
    cfg = cfg or GroundingConfig()
    candidates: list[tuple[int, Detection]] = []
    label_rejected = 0
    for i, ann in enumerate(annotations):
        queries = (ann.label, ann.reason) if ann.reason.strip() else (ann.label,)
        resp = detector.detect(DetectorRequest(image_ref, queries, cfg.box_threshold))
        for det in resp.detections:
            if label_match(det.label, ann.label):
                candidates.append((i, det))
            else:
                label_rejected += 1
    assignment = greedy_dedup(candidates, cfg.dedup_iou, queries=range(len(annotations)))
    boxes: dict[int, Detection] = {}
    area_rejected = 0
    for obj, ci in assignment.pairs:
        det = candidates[ci][1]
        if area_fraction(det.box) > cfg.max_area_fraction:
            area_rejected += 1
            continue
        boxes[obj] = det
    return FrameGrounding(frame, boxes, len(candidates), label_rejected, area_rejected)


def ground_subclip(
    subclip: SubclipRecord,
    media_ref: str,
    annotations: Sequence[ObjectAnnotation],
    detector,
    cfg: GroundingConfig | None = None,
) -> GroundedSet:
    """Pick the candidate frame that grounds the most objects.

    Frames are tried latest first; ties keep the earlier-evaluated (later)
    frame. Evaluation stops early once every object is grounded.
    """
    cfg = cfg or GroundingConfig()
    frames = candidate_frames(subclip, cfg)
    best: FrameGrounding | None = None
    evaluated, skipped = [], []
    for f in frames:
        if not annotations:
            break
        try:
            fg = ground_frame(frame_ref(media_ref, f), f, annotations, detector, cfg)
        except ClientError as exc:
            log.warning("grounding %s: frame %d skipped: %s", subclip.subclip_id, f, exc)
            skipped.append(f)
            continue
        evaluated.append(f)
        if best is None or fg.count > best.count:
            best = fg
        if best.count == len(annotations):
            break

    if best is None:
        return GroundedSet(subclip.subclip_id, frames[0], [GroundedObject(a) for a in annotations], evaluated, skipped)
    objs = []
    for i, ann in enumerate(annotations):
        det = best.boxes.get(i)
        if det is None:
            objs.append(GroundedObject(ann))
        else:
            objs.append(GroundedObject(ann, det.box, det.confidence, best.frame))
    return GroundedSet(subclip.subclip_id, best.frame, objs, evaluated, skipped)


def grounding_rate(sets: Iterable[GroundedSet] | tuple[int, int]) -> float:
    """Grounded objects over all objects; also accepts ``(grounded, total)``."""
    if isinstance(sets, tuple):
        grounded, total = sets
    else:
        grounded = total = 0
        for s in sets:
            grounded += s.grounded_count
            total += len(s.objects)
    if total == 0:
        return 0.0
    return float(Fraction(grounded, total))
