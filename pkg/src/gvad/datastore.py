"""On-disk formats, run configuration, dataset statistics and training
manifests.

Every artifact is JSONL (one JSON object per line, keys sorted) except the
manifest and statistics reports, which are single JSON documents. Writes go
to a temporary file in the target directory and are published with an
atomic rename.
"""

from __future__ import annotations

import json
import math
import os
import random
import re
import statistics
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import jsonschema
import yaml

from .clients import ServiceEndpoint
from .cot import ANALYSIS_PREFIX, ANOMALY_QUESTION, _DETECTION_RE, _find_header
from .geometry import BIN_SCALE
from .grounding import GroundedSet, GroundingConfig, frame_ref
from .loss_math import StageConfig, default_schedule
from .scene_gate import ABNORMAL, NORMAL, GateConfig, SubsamplePolicy


class SchemaViolation(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


# -- schemas -------------------------------------------------------------------

_LABEL = {"enum": [NORMAL, ABNORMAL]}
_BIN = {"type": "integer", "minimum": 0, "maximum": BIN_SCALE}
_BINBOX = {"type": "array", "items": _BIN, "minItems": 4, "maxItems": 4}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_BOX = {"type": "array", "items": _UNIT, "minItems": 4, "maxItems": 4}
_FRAME = {"type": "integer", "minimum": 0}

SCHEMAS: dict[str, dict] = {
    "video": {
        "type": "object",
        "required": ["video_id", "media_ref", "total_frames", "label"],
        "properties": {
            "video_id": {"type": "string", "minLength": 1},
            "media_ref": {"type": "string"},
            "total_frames": {"type": "integer", "minimum": 1},
            "fps": {"type": "number", "exclusiveMinimum": 0},
            "label": _LABEL,
            "category": {"type": ["string", "null"]},
            "anomaly_intervals": {"type": ["array", "null"], "items": {"type": "array", "items": _FRAME, "minItems": 2, "maxItems": 2}},
        },
    },
    "embedding": {
        "type": "object",
        "required": ["video_id", "frame_index", "embedding"],
        "properties": {
            "video_id": {"type": "string"},
            "frame_index": _FRAME,
            "embedding": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        },
    },
    "sentence": {
        "type": "object",
        "required": ["video_id", "start_s", "end_s", "text"],
        "properties": {
            "video_id": {"type": "string"},
            "start_s": {"type": "number", "minimum": 0},
            "end_s": {"type": "number", "minimum": 0},
            "text": {"type": "string"},
        },
    },
    "subclip": {
        "type": "object",
        "required": ["subclip_id", "video_id", "start_frame", "end_frame", "label"],
        "properties": {
            "subclip_id": {"type": "string"},
            "video_id": {"type": "string"},
            "start_frame": _FRAME,
            "end_frame": _FRAME,
            "label": _LABEL,
            "boundary_similarity": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        },
    },
    "annotation": {
        "type": "object",
        "required": ["subclip_id", "prompt_sha256", "response", "accepted", "rejected"],
        "properties": {
            "subclip_id": {"type": "string"},
            "prompt_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
            "response": {"type": "string"},
            "accepted": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["event", "reason", "label", "confidence"],
                    "properties": {"event": _LABEL, "reason": {"type": "string"},
                                   "label": {"type": "string", "minLength": 1}, "confidence": _UNIT},
                },
            },
            "rejected": {"type": "array"},
            "flags": {"type": "array", "items": {"type": "string"}},
        },
    },
    "grounded": {
        "type": "object",
        "required": ["subclip_id", "anchor_frame", "objects"],
        "properties": {
            "subclip_id": {"type": "string"},
            "anchor_frame": _FRAME,
            "objects": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["label", "event", "reason", "confidence", "bbox_2d", "det_confidence"],
                    "properties": {
                        "label": {"type": "string", "minLength": 1},
                        "event": _LABEL,
                        "reason": {"type": "string"},
                        "confidence": _UNIT,
                        "bbox_2d": {"oneOf": [_BINBOX, {"type": "null"}]},
                        "det_confidence": {"oneOf": [_UNIT, {"type": "null"}]},
                    },
                },
            },
        },
    },
    "instruction": {
        "type": "object",
        "required": ["subclip_id", "label", "user", "assistant"],
        "properties": {"subclip_id": {"type": "string"}, "label": _LABEL,
                       "user": {"type": "string"}, "assistant": {"type": "string"}},
    },
    "detection_item": {
        "type": "object",
        "required": ["sample_id", "subclip_id", "image", "system", "user", "assistant"],
        "properties": {"sample_id": {"type": "string"}, "subclip_id": {"type": "string"}, "image": {"type": "string"},
                       "system": {"type": "string"}, "user": {"type": "string"}, "assistant": {"type": "string"}},
    },
    "eval_record": {
        "type": "object",
        "required": ["sample_id", "label"],
        "properties": {
            "sample_id": {"type": "string"},
            "label": {"enum": [0, 1]},
            "score": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            "verdict": {"enum": [NORMAL, ABNORMAL, None]},
            "pred_boxes": {"type": ["array", "null"], "items": _BOX},
            "gt_boxes": {"type": ["array", "null"], "items": _BOX},
            "category": {"type": ["string", "null"]},
        },
        "anyOf": [{"required": ["score"]}, {"required": ["verdict"]}],
    },
    "transcript": {
        "type": "object",
        "required": ["key", "service", "request", "response"],
        "properties": {"key": {"type": "string"}, "service": {"enum": ["vlm", "detector", "embedder"]},
                       "request": {"type": "object"}, "response": {"type": "object"}},
    },
    "manifest": {
        "type": "object",
        "required": ["seed", "stages"],
        "properties": {
            "seed": {"type": "integer"},
            "stages": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["stage", "items", "counts"],
                    "properties": {
                        "stage": {"type": "integer", "minimum": 1},
                        "items": {"type": "array", "items": {
                            "type": "object",
                            "required": ["sample_id", "kind", "modality"],
                            "properties": {"sample_id": {"type": "string"},
                                           "kind": {"enum": ["video_label", "image_detection", "video_cot"]},
                                           "modality": {"enum": ["video", "image"]}},
                        }},
                        "counts": {"type": "object"},
                    },
                },
            },
        },
    },
    "stats": {"type": "object", "required": ["phase1", "phase2", "phase3"]},
}


def validate(record: Mapping, schema: str) -> None:
    jsonschema.validate(record, SCHEMAS[schema])


def dumps(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, allow_nan=False)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | os.PathLike, records: Iterable[Mapping], schema: str | None = None) -> int:
    lines = []
    for i, r in enumerate(records, start=1):
        if schema is not None:
            try:
                validate(r, schema)
            except jsonschema.ValidationError as exc:
                raise SchemaViolation(path, i, exc.message) from None
        lines.append(dumps(r))
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def iter_jsonl(path: str | os.PathLike, schema: str | None = None) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(path, n, f"malformed JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise SchemaViolation(path, n, "line is not a JSON object")
            if schema is not None:
                try:
                    validate(rec, schema)
                except jsonschema.ValidationError as exc:
                    raise SchemaViolation(path, n, exc.message) from None
            yield rec


def read_jsonl(path: str | os.PathLike, schema: str | None = None) -> list[dict]:
    return list(iter_jsonl(path, schema))


def write_json(path: str | os.PathLike, doc: Mapping, schema: str | None = None) -> None:
    if schema is not None:
        try:
            validate(doc, schema)
        except jsonschema.ValidationError as exc:
            raise SchemaViolation(path, 1, exc.message) from None
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def read_json(path: str | os.PathLike, schema: str | None = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(path, exc.lineno, f"malformed JSON: {exc.msg}") from None
    if schema is not None:
        try:
            validate(doc, schema)
        except jsonschema.ValidationError as exc:
            raise SchemaViolation(path, 1, exc.message) from None
    return doc


# -- run configuration ---------------------------------------------------------

DEFAULT_CONFIG_YAML = """\
# gvad run configuration. Every value below is the default.
seed: 42
fps: 30.0                  # used when a video record carries no fps
embed_dim: 512             # image embedding width (ViT-B/32 image tower)

gate:
  stride: 15               # embed every 15th frame (published setting)
  tau: 0.92                # cosine threshold for a scene boundary (published setting)

narration:
  min_overlap: 0.0         # share of a sentence that must overlap a subclip; 0 keeps any overlap (unspecified upstream)
  parse_retries: 2

grounding:
  box_threshold: 0.25      # detector confidence floor (published setting)
  dedup_iou: 0.5           # greedy deduplication IoU (published setting)
  max_area_fraction: 0.5   # boxes over half the frame are scene-level and dropped (published setting)
  fallback_frames: 5       # earlier frames tried after the last one; 0 grounds the last frame only

subsample:
  per_video: 2             # retained subclips per video, one per class when possible (published setting)
  max_per_video: null      # cap for the global backfill; null means per_video
  target_total: null       # dataset-level slot count to backfill towards; null disables backfill
  grounding_per_video: 10  # subclips per video sent to spatial grounding (published setting)

cot:
  retries: 2

assemble:
  stage2_detection_share: 0.8   # detection / CoT mixture of the grounding stage (published setting)
  stage2_slots: null            # total stage-2 items; null uses as many as the 80/20 split allows

stages:                    # curriculum (published hyperparameter and loss-weight tables)
  - {stage: 1, lambda_bce: 1.0, lambda_lm: 0.0, lambda_giou: 0.0, epochs: 2, peak_lr: 1.0e-3, warmup_ratio: 0.1,
     mixture: {video_label: 100}}
  - {stage: 2, lambda_bce: 1.0, lambda_lm: 0.5, lambda_giou: 1.0, epochs: 3, peak_lr: 5.0e-4, warmup_ratio: 0.05,
     mixture: {image_detection: 80, video_cot: 20}}
  - {stage: 3, lambda_bce: 1.0, lambda_lm: 0.5, lambda_giou: 0.0, epochs: 3, peak_lr: 5.0e-4, warmup_ratio: 0.05,
     mixture: {video_cot: 100}}

clients:
  timeout: 60.0
  max_retries: 3
  max_in_flight: 4
  backoff: 0.5
  # endpoints come from GVAD_VLM_URL, GVAD_DETECTOR_URL, GVAD_EMBED_URL; token from GVAD_API_TOKEN

archive:
  transcript: false        # write the request/response transcript next to the outputs
"""


@dataclass
class NarrationConfig:
    min_overlap: float = 0.0
    parse_retries: int = 2

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError("narration.min_overlap must be in [0, 1]")
        if self.parse_retries < 0:
            raise ValueError("narration.parse_retries must be >= 0")


@dataclass
class AssembleConfig:
    stage2_detection_share: float = 0.8
    stage2_slots: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.stage2_detection_share <= 1.0:
            raise ValueError("assemble.stage2_detection_share must be in [0, 1]")
        if self.stage2_slots is not None and self.stage2_slots < 0:
            raise ValueError("assemble.stage2_slots must be >= 0")


@dataclass
class ClientConfig:
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff: float = 0.5

    def __post_init__(self) -> None:
        # reuse the endpoint invariants
        ServiceEndpoint("config://", self.timeout, self.max_retries, self.max_in_flight, backoff=self.backoff)


@dataclass
class RunConfig:
    seed: int = 42
    fps: float = 30.0
    embed_dim: int = 512
    gate: GateConfig = field(default_factory=GateConfig)
    narration: NarrationConfig = field(default_factory=NarrationConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    subsample: SubsamplePolicy = field(default_factory=SubsamplePolicy)
    grounding_per_video: int = 10
    cot_retries: int = 2
    assemble: AssembleConfig = field(default_factory=AssembleConfig)
    stages: list[StageConfig] = field(default_factory=default_schedule)
    clients: ClientConfig = field(default_factory=ClientConfig)
    archive_transcript: bool = False

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValueError("fps must be > 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.grounding_per_video < 1:
            raise ValueError("grounding_per_video must be >= 1")
        if [s.stage for s in self.stages] != list(range(1, len(self.stages) + 1)):
            raise ValueError("stages must be numbered 1..n in order")

    @classmethod
    def from_mapping(cls, doc: Mapping | None) -> "RunConfig":
        base = yaml.safe_load(DEFAULT_CONFIG_YAML)
        merged = _deep_merge(base, doc or {})
        unknown = set(merged) - set(base)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sub = dict(merged["subsample"])
        grounding_per_video = sub.pop("grounding_per_video")
        return cls(
            seed=int(merged["seed"]),
            fps=float(merged["fps"]),
            embed_dim=int(merged["embed_dim"]),
            gate=GateConfig(**merged["gate"]),
            narration=NarrationConfig(**merged["narration"]),
            grounding=GroundingConfig(**merged["grounding"]),
            subsample=SubsamplePolicy(seed=int(merged["seed"]), **sub),
            grounding_per_video=int(grounding_per_video),
            cot_retries=int(merged["cot"]["retries"]),
            assemble=AssembleConfig(**merged["assemble"]),
            stages=[StageConfig(**{**s, "mixture": dict(s["mixture"])}) for s in merged["stages"]],
            clients=ClientConfig(**merged["clients"]),
            archive_transcript=bool(merged["archive"]["transcript"]),
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, **overrides) -> "RunConfig":
        doc = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh) or {}
            if not isinstance(doc, dict):
                raise ValueError(f"{path}: config must be a mapping")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d


def _deep_merge(base: Mapping, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(base.get(k), Mapping):
            inner_unknown = set(v) - set(base[k])
            if inner_unknown:
                raise ValueError(f"unknown config keys under {k}: {sorted(inner_unknown)}")
            out[k] = _deep_merge(base[k], v)
        else:
            out[k] = v
    return out


# -- statistics ----------------------------------------------------------------

def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``p``% of
    the data at or below it."""
    if not values:
        raise ValueError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    xs = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return xs[rank - 1]


def _summary(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0, "mean": None, "median": None, "p25": None, "p75": None}
    return {
        "n": len(values),
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "p25": percentile(values, 25),
        "p75": percentile(values, 75),
    }


def _share(flags: Sequence[bool]) -> float | None:
    return sum(flags) / len(flags) if flags else None


def phase1_stats(videos: Sequence[Mapping], subclips: Sequence[Mapping], fps: float = 30.0) -> dict:
    """Retained-subclip counts and durations."""
    fps_of = {v["video_id"]: float(v.get("fps") or fps) for v in videos}
    durations = [(s["end_frame"] - s["start_frame"] + 1) / fps_of.get(s["video_id"], fps) for s in subclips]
    per_video = Counter(s["video_id"] for s in subclips)
    counts = [per_video.get(v["video_id"], 0) for v in videos]
    return {
        "videos": len(videos),
        "videos_normal": sum(v["label"] == NORMAL for v in videos),
        "videos_abnormal": sum(v["label"] == ABNORMAL for v in videos),
        "subclips": len(subclips),
        "subclips_normal": sum(s["label"] == NORMAL for s in subclips),
        "subclips_abnormal": sum(s["label"] == ABNORMAL for s in subclips),
        "subclips_per_video": _summary(counts),
        "duration_s": _summary(durations),
        "share_le_10s": _share([d <= 10 for d in durations]),
        "share_le_30s": _share([d <= 30 for d in durations]),
        "share_le_60s": _share([d <= 60 for d in durations]),
    }


def phase2_stats(grounded: Sequence[Mapping], labels: Mapping[str, str] | None = None,
                 top_k: int = 9, min_instances: int = 20) -> dict:
    """Object and grounding counts over GroundedSet records."""
    labels = labels or {}
    objs = [o for g in grounded for o in g["objects"]]
    boxed = [o["bbox_2d"] is not None for o in objs]
    freq = Counter(o["label"] for o in objs)
    missed = Counter(o["label"] for o in objs if o["bbox_2d"] is None)
    per_set = [len(g["objects"]) for g in grounded]
    per_set_boxed = [sum(o["bbox_2d"] is not None for o in g["objects"]) for g in grounded]
    per_video = Counter(g["subclip_id"].rsplit(":", 1)[0] for g in grounded)
    ungrounded = [
        {"label": lab, "missed": missed[lab], "total": n, "rate": missed[lab] / n}
        for lab, n in freq.items()
        if n >= min_instances
    ]
    ungrounded.sort(key=lambda r: (-r["rate"], r["label"]))
    return {
        "samples": len(grounded),
        "samples_normal": sum(labels.get(g["subclip_id"]) == NORMAL for g in grounded),
        "samples_abnormal": sum(labels.get(g["subclip_id"]) == ABNORMAL for g in grounded),
        "subclips_per_video": _summary(list(per_video.values())),
        "object_instances": len(objs),
        "unique_labels": len(freq),
        "singleton_labels": sum(1 for n in freq.values() if n == 1),
        "rare_labels": sum(1 for n in freq.values() if 2 <= n <= 5),
        "objects_per_subclip": _summary(per_set),
        "grounded_per_subclip": _summary(per_set_boxed),
        "grounding_rate": _share(boxed),
        "share_no_grounding": _share([c == 0 for c in per_set_boxed]),
        "most_frequent": [{"label": lab, "count": n} for lab, n in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]],
        "highest_ungrounded": ungrounded[:top_k],
    }


def _words(text: str) -> int:
    return len(text.split())


def cot_body(assistant: str) -> str:
    """The generated part of a response: everything from the fixed
    analysis prefix on, without the detection block."""
    i = assistant.find(ANALYSIS_PREFIX)
    return assistant[i:] if i >= 0 else assistant


def _sections(text: str) -> dict[str, str | None]:
    out: dict[str, str | None] = {}
    pos = 0
    found = []
    for name in ("observations", "analysis", "answer"):
        m = _find_header(text, name, pos)
        found.append((name, m))
        if m:
            pos = m.end()
    for i, (name, m) in enumerate(found):
        if m is None:
            out[name] = None
            continue
        nxt = next((mm for _, mm in found[i + 1:] if mm is not None), None)
        out[name] = text[m.end():nxt.start() if nxt else len(text)].strip().strip("*").strip()
    return out


_BOX_TUPLE = re.compile(r"\[\s*\d+\s*,\s*\d+\s*,\s*\d+\s*,\s*\d+\s*\]")


def phase3_stats(items: Sequence[Mapping]) -> dict:
    """CoT length, section completeness and spatial content."""
    bodies = [cot_body(it["assistant"]) for it in items]
    secs = [_sections(b) for b in bodies]
    words = [_words(b) for b in bodies]
    chars = [len(b) for b in bodies]
    obs_words = [_words(s["observations"]) for s in secs if s["observations"]]
    ana_words = [_words(s["analysis"]) for s in secs if s["analysis"]]
    boxes = [len(_BOX_TUPLE.findall(b)) for b in bodies]
    detected = [len(_DETECTION_RE.findall(it["assistant"])) for it in items]
    return {
        "items": len(items),
        "answer_normal": sum(it["label"] == NORMAL for it in items),
        "answer_abnormal": sum(it["label"] == ABNORMAL for it in items),
        "completeness_observations": _share([bool(s["observations"]) for s in secs]),
        "completeness_analysis": _share([bool(s["analysis"]) for s in secs]),
        "completeness_answer": _share([s["answer"] is not None for s in secs]),
        "words": _summary(words),
        "chars": _summary(chars),
        "observation_words": _summary(obs_words),
        "analysis_words": _summary(ana_words),
        "detected_objects_per_item": _summary(detected),
        "boxes_per_item": _summary(boxes),
        "share_with_box": _share([b >= 1 for b in boxes]),
    }


def compute_stats(videos, retained, grounded, items, fps: float = 30.0,
                  subclip_labels: Mapping[str, str] | None = None) -> dict:
    """All three phase reports. ``subclip_labels`` gives the class of every
    grounded subclip; it defaults to the labels of ``retained``."""
    labels = dict(subclip_labels) if subclip_labels is not None else {s["subclip_id"]: s["label"] for s in retained}
    return {
        "phase1": phase1_stats(videos, retained, fps),
        "phase2": phase2_stats(grounded, labels),
        "phase3": phase3_stats(items),
    }


def _fmt(v, pct: bool = False, nd: int = 1) -> str:
    if v is None:
        return "--"
    if pct:
        return f"{100 * v:.1f}%"
    if isinstance(v, float):
        return f"{v:.{nd}f}"
    return f"{v:,}"


def render_stats(stats: Mapping) -> str:
    p1, p2, p3 = stats["phase1"], stats["phase2"], stats["phase3"]
    d = p1["duration_s"]
    rows = [
        ("Phase 1: subclipping", None),
        ("Videos (Normal / Abnormal)", f"{_fmt(p1['videos'])} ({_fmt(p1['videos_normal'])} / {_fmt(p1['videos_abnormal'])})"),
        ("Total subclips", _fmt(p1["subclips"])),
        ("  Normal / Abnormal", f"{_fmt(p1['subclips_normal'])} / {_fmt(p1['subclips_abnormal'])}"),
        ("Subclips / video (mean / median)", f"{_fmt(p1['subclips_per_video']['mean'])} / {_fmt(p1['subclips_per_video']['median'])}"),
        ("Subclip duration, median", f"{_fmt(d['median'])} s"),
        ("  p25 / p75", f"{_fmt(d['p25'])} s / {_fmt(d['p75'])} s"),
        ("  <= 10 s", _fmt(p1["share_le_10s"], pct=True)),
        ("  <= 30 s", _fmt(p1["share_le_30s"], pct=True)),
        ("  <= 60 s", _fmt(p1["share_le_60s"], pct=True)),
        ("Phase 2: object grounding", None),
        ("Total samples (Normal / Abnormal)", f"{_fmt(p2['samples'])} ({_fmt(p2['samples_normal'])} / {_fmt(p2['samples_abnormal'])})"),
        ("Subclips / video (mean / median)", f"{_fmt(p2['subclips_per_video']['mean'])} / {_fmt(p2['subclips_per_video']['median'])}"),
        ("Total object instances", _fmt(p2["object_instances"])),
        ("Unique object labels", _fmt(p2["unique_labels"])),
        ("  Singleton labels", _fmt(p2["singleton_labels"])),
        ("  Rare labels (2-5 occurrences)", _fmt(p2["rare_labels"])),
        ("Objects / subclip (mean / median)", f"{_fmt(p2['objects_per_subclip']['mean'])} / {_fmt(p2['objects_per_subclip']['median'])}"),
        ("Grounded with box (mean / median)", f"{_fmt(p2['grounded_per_subclip']['mean'])} / {_fmt(p2['grounded_per_subclip']['median'])}"),
        ("Grounding success rate", _fmt(p2["grounding_rate"], pct=True)),
        ("Subclips with no grounding", _fmt(p2["share_no_grounding"], pct=True)),
        ("Phase 3: chain-of-thought", None),
        ("Total CoT annotations", _fmt(p3["items"])),
        ("  Answer: Normal / Abnormal", f"{_fmt(p3['answer_normal'])} / {_fmt(p3['answer_abnormal'])}"),
        ("Section completeness (Obs / Ana / Ans)", " / ".join(_fmt(p3[k], pct=True) for k in
                                                             ("completeness_observations", "completeness_analysis", "completeness_answer"))),
        ("Words (mean / median)", f"{_fmt(p3['words']['mean'])} / {_fmt(p3['words']['median'])}"),
        ("Characters (mean / median)", f"{_fmt(p3['chars']['mean'])} / {_fmt(p3['chars']['median'])}"),
        ("  p25 / p75 (words)", f"{_fmt(p3['words']['p25'])} / {_fmt(p3['words']['p75'])}"),
        ("Bbox coordinates / CoT (mean / median)", f"{_fmt(p3['boxes_per_item']['mean'])} / {_fmt(p3['boxes_per_item']['median'])}"),
        ("CoTs with >= 1 bbox reference", _fmt(p3["share_with_box"], pct=True)),
    ]
    width = max(len(k) for k, _ in rows) + 2
    out = []
    for k, v in rows:
        out.append(k if v is None else f"{k:<{width}}{v:>24}")
    return "\n".join(out) + "\n"


# -- manifests -----------------------------------------------------------------

STAGE2_SYSTEM = (
    "You are a precise object detector for surveillance footage. Given an image (the last frame of a video clip), "
    "locate every instance of the specified object categories and predict their bounding boxes.\n"
    "Output ONLY valid JSON — no extra text, no markdown, no code fences.\n"
    'Format: [{"bbox_2d": [x1, y1, x2, y2], "label": "CATEGORY", "anomaly": true/false, '
    '"reason": "brief explanation of why this object is normal or anomalous"}, ...]\n'
    "Coordinates are integers in [0, 1000] where (0, 0) is top-left and (1000, 1000) is bottom-right. "
    "Each bounding box must tightly fit the object — boxes should NOT cover the entire frame and must not exceed "
    "60% of the frame area. If a category is not visible, omit it. If nothing is visible, output []."
)
DETECTION_USER = (
    "Locate every instance that belongs to the following categories: {labels}. "
    "Output bounding box coordinates in JSON for every label."
)


def detection_items(grounded: Sequence[Mapping], media_refs: Mapping[str, str]) -> list[dict]:
    """Image-level grounding samples: the anchor frame plus its boxed objects
    as a ``bbox_2d`` JSON target. Sets without any box are skipped."""
    out = []
    for g in grounded:
        boxed = [o for o in g["objects"] if o["bbox_2d"] is not None]
        if not boxed:
            continue
        vid = g["subclip_id"].rsplit(":", 1)[0]
        labels = list(dict.fromkeys(o["label"] for o in boxed))
        target = [{"bbox_2d": o["bbox_2d"], "label": o["label"]} for o in boxed]
        out.append({
            "sample_id": f"{g['subclip_id']}@{g['anchor_frame']}",
            "subclip_id": g["subclip_id"],
            "image": frame_ref(media_refs[vid], int(g["anchor_frame"])),
            "system": STAGE2_SYSTEM,
            "user": DETECTION_USER.format(labels=", ".join(labels)),
            "assistant": json.dumps(target, ensure_ascii=False),
        })
    return out


_KIND_MODALITY = {"video_label": "video", "image_detection": "image", "video_cot": "video"}


def _mixture_counts(mixture: Mapping[str, float], available: Mapping[str, int], slots: int | None) -> dict[str, int]:
    weights = {k: float(v) for k, v in mixture.items() if v > 0}
    total_w = sum(weights.values())
    if not weights:
        return {}
    if slots is None:
        # the largest total that every component can supply at its share
        slots = min(int(math.floor(available.get(k, 0) * total_w / w + 1e-9)) for k, w in weights.items())
    counts = {}
    assigned = 0
    kinds = sorted(weights, key=lambda k: -weights[k])
    for k in kinds[:-1]:
        counts[k] = int(math.floor(slots * weights[k] / total_w + 0.5))
        assigned += counts[k]
    counts[kinds[-1]] = slots - assigned
    for k, n in counts.items():
        if n > available.get(k, 0):
            raise ValueError(f"mixture needs {n} {k} items but only {available.get(k, 0)} exist")
    return counts


def assemble(
    videos: Sequence[Mapping],
    detection: Sequence[Mapping],
    cot_items: Sequence[Mapping],
    stages: Sequence[StageConfig],
    seed: int = 42,
    stage2_slots: int | None = None,
) -> dict:
    """Stage-keyed manifests, sampled per the stage mixtures.

    Single-source stages take every available item; mixed stages draw a
    seeded sample at the configured ratio.
    """
    pools = {
        "video_label": sorted(v["video_id"] for v in videos),
        "image_detection": sorted(d["sample_id"] for d in detection),
        "video_cot": sorted(c["subclip_id"] for c in cot_items),
    }
    available = {k: len(v) for k, v in pools.items()}
    out = []
    for st in stages:
        mix = {k: v for k, v in st.mixture.items() if v > 0}
        unknown = set(mix) - set(pools)
        if unknown:
            raise ValueError(f"stage {st.stage}: unknown data kinds {sorted(unknown)}")
        if len(mix) == 1:
            counts = {k: available[k] for k in mix}
        else:
            counts = _mixture_counts(mix, available, stage2_slots)
        rng = random.Random(f"{seed}:stage{st.stage}")
        items = []
        for kind in sorted(counts):
            pool = pools[kind]
            chosen = pool if counts[kind] == len(pool) else sorted(rng.sample(pool, counts[kind]))
            items.extend({"sample_id": sid, "kind": kind, "modality": _KIND_MODALITY[kind]} for sid in chosen)
        out.append({"stage": st.stage, "items": items, "counts": counts,
                    "lambdas": list(st.lambdas), "mixture": dict(st.mixture)})
    return {"seed": seed, "stages": out}


def stage1_items(videos: Sequence[Mapping]) -> list[dict]:
    """Video/label pairs for the classifier warm-up."""
    return [
        {"sample_id": v["video_id"], "media": v["media_ref"], "system": ANOMALY_QUESTION, "label": v["label"]}
        for v in sorted(videos, key=lambda v: v["video_id"])
    ]


def grounded_sets(records: Sequence[Mapping]) -> list[GroundedSet]:
    return [GroundedSet.from_dict(r) for r in records]
