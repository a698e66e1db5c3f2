"""Video action annotations: schema, ingestion, and collection statistics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import jsonschema

from cfbench._io import dumps


class InteractionType(str, Enum):
    H2H = "H2H"
    H2O = "H2O"


class AnnotationError(ValueError):
    """Base class for annotation ingestion failures."""


class AnnotationParseError(AnnotationError):
    """The document does not match the annotation schema."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


class AnnotationValidationError(AnnotationError):
    """The document parsed but breaks a semantic invariant."""


ANNOTATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["video_id", "task_name", "interaction_type", "duration_s", "steps"],
    "properties": {
        "video_id": {"type": "string", "minLength": 1},
        "task_name": {"type": "string", "minLength": 1},
        "interaction_type": {"enum": ["H2H", "H2O"]},
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "captions": {"type": ["string", "null"]},
        "steps": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "text", "timestamp_s"],
                "properties": {
                    "id": {"type": "integer"},
                    "text": {"type": "string"},
                    "timestamp_s": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}

_validator = jsonschema.Draft202012Validator(ANNOTATION_SCHEMA)


@dataclass(frozen=True)
class ActionStep:
    id: int
    text: str
    timestamp_s: float


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    task_name: str
    interaction_type: InteractionType
    duration_s: float
    steps: tuple[ActionStep, ...]
    captions: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "interaction_type", InteractionType(self.interaction_type))
        object.__setattr__(self, "steps", tuple(self.steps))
        _check_invariants(self)

    @property
    def step_ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.steps)

    def step(self, step_id: int) -> ActionStep:
        if not 1 <= step_id <= len(self.steps):
            raise KeyError(f"video {self.video_id!r} has no step {step_id}")
        return self.steps[step_id - 1]


def _check_invariants(v: VideoAnnotation) -> None:
    if v.duration_s <= 0:
        raise AnnotationValidationError(f"duration_s must be positive, got {v.duration_s}")
    if len(v.steps) < 2:
        raise AnnotationValidationError(
            f"video {v.video_id!r} has {len(v.steps)} step(s); at least 2 are required"
        )
    prev = -math.inf
    for expected_id, step in enumerate(v.steps, start=1):
        if step.id != expected_id:
            raise AnnotationValidationError(
                f"step ids must run 1..n in order; found {step.id} at position {expected_id}"
            )
        if not step.text.strip():
            raise AnnotationValidationError(f"step {step.id} has empty text")
        if step.timestamp_s < prev:
            raise AnnotationValidationError(f"step {step.id} timestamp decreases")
        if step.timestamp_s < 0 or step.timestamp_s > v.duration_s:
            raise AnnotationValidationError(
                f"step {step.id} timestamp {step.timestamp_s} outside [0, {v.duration_s}]"
            )
        prev = step.timestamp_s


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (f".{p}" if parts else str(p)))
    if err.validator == "required":
        # jsonschema reports missing keys on the parent object
        missing = err.message.split("'")[1]
        parts.append(f".{missing}" if parts else missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        parts.append(f".{extra}" if parts else extra)
    return "".join(parts) or "<document>"


def annotation_from_dict(doc: Mapping) -> VideoAnnotation:
    """Validate a decoded document and build a canonical annotation.

    Steps are stable-sorted by timestamp and renumbered 1..n, so source ids
    only matter for tie-breaking through their document order.
    """
    errors = sorted(_validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise AnnotationParseError(_error_path(err), err.message)
    raw_steps = doc["steps"]
    if not raw_steps:
        raise AnnotationValidationError(f"video {doc['video_id']!r} has no steps")
    ordered = sorted(raw_steps, key=lambda s: s["timestamp_s"])
    steps = tuple(
        ActionStep(id=i, text=s["text"], timestamp_s=float(s["timestamp_s"]))
        for i, s in enumerate(ordered, start=1)
    )
    return VideoAnnotation(
        video_id=doc["video_id"],
        task_name=doc["task_name"],
        interaction_type=InteractionType(doc["interaction_type"]),
        duration_s=float(doc["duration_s"]),
        steps=steps,
        captions=doc.get("captions"),
    )


def parse_annotation(raw: bytes | str) -> VideoAnnotation:
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError("<document>", f"invalid JSON: {exc}") from exc
    return annotation_from_dict(doc)


def annotation_to_dict(v: VideoAnnotation) -> dict:
    out = {
        "video_id": v.video_id,
        "task_name": v.task_name,
        "interaction_type": v.interaction_type.value,
        "duration_s": v.duration_s,
        "steps": [{"id": s.id, "text": s.text, "timestamp_s": s.timestamp_s} for s in v.steps],
    }
    if v.captions is not None:
        out["captions"] = v.captions
    return out


def serialize_annotation(v: VideoAnnotation) -> bytes:
    return dumps(annotation_to_dict(v)).encode("utf-8")


def adjacent_pairs(v: VideoAnnotation) -> list[tuple[ActionStep, ActionStep]]:
    return list(zip(v.steps, v.steps[1:]))


@dataclass(frozen=True)
class DatasetStats:
    video_count: int
    h2h_fraction: float
    h2o_fraction: float
    duration_percentiles: dict[float, float] = field(default_factory=dict)
    per_level_counts: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "video_count": self.video_count,
            "h2h_fraction": self.h2h_fraction,
            "h2o_fraction": self.h2o_fraction,
            "duration_percentiles": {str(k): v for k, v in self.duration_percentiles.items()},
            "per_level_counts": {str(k): v for k, v in self.per_level_counts.items()},
        }


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``pct``% of data at or below it."""
    if not values:
        raise ValueError("percentile of an empty sequence")
    if not 0 <= pct <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {pct}")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100 * len(ordered)))
    return ordered[rank - 1]


def _level_number(level) -> int:
    raw = getattr(level, "value", level)
    if isinstance(raw, str):
        raw = raw.upper().removeprefix("L")
    return int(raw)


def dataset_stats(
    collection: Sequence[VideoAnnotation],
    questions: Iterable | None = None,
    percentiles: Sequence[float] = (50, 90, 95),
) -> DatasetStats:
    """Summarize a video collection and, optionally, its question set.

    ``questions`` may hold question objects or dicts; only their ``level``
    is read.
    """
    if not collection:
        raise ValueError("dataset_stats needs at least one video")
    n = len(collection)
    h2h = sum(1 for v in collection if v.interaction_type is InteractionType.H2H)
    durations = [v.duration_s for v in collection]
    levels: Counter[int] = Counter({1: 0, 2: 0, 3: 0})
    for q in questions or ():
        level = q["level"] if isinstance(q, Mapping) else q.level
        levels[_level_number(level)] += 1
    return DatasetStats(
        video_count=n,
        h2h_fraction=h2h / n,
        h2o_fraction=(n - h2h) / n,
        duration_percentiles={float(p): nearest_rank(durations, p) for p in percentiles},
        per_level_counts=dict(sorted(levels.items())),
    )
