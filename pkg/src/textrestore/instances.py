"""Text instance records and the annotation JSON schema.

Annotation files are a list of ``{"image": path, "instances": [{"polygon":
[[x, y], ...], "text": str}]}`` records with polygon coordinates normalized
to [0, 1]. The image path doubles as the record id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import polygon_hull_box


class AnnotationError(ValueError):
    """Annotation file violates the schema."""


@dataclass
class TextInstance:
    polygon: np.ndarray  # (U, 2) normalized coords
    text: str
    confidence: float = 1.0

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2:
            raise AnnotationError(f"polygon must be (U, 2), got {self.polygon.shape}")
        if not 0.0 <= self.confidence <= 1.0:
            raise AnnotationError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def hull_box(self) -> np.ndarray:
        return polygon_hull_box(self.polygon)

    def to_dict(self) -> dict:
        return {
            "polygon": [[float(x), float(y)] for x, y in self.polygon],
            "text": self.text,
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TextInstance":
        return cls(
            polygon=np.asarray(d["polygon"], dtype=np.float64),
            text=str(d["text"]),
            confidence=float(d.get("confidence", 1.0)),
        )


@dataclass
class AnnotationRecord:
    image: str
    instances: list[TextInstance] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"image": self.image, "instances": [i.to_dict() for i in self.instances]}


def save_annotations(records: list[AnnotationRecord], path: str | Path) -> None:
    data = [r.to_dict() for r in records]
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, list):
        raise AnnotationError(f"{path}: top level must be a list of records")
    records = []
    seen: set[str] = set()
    for i, rec in enumerate(data):
        try:
            image = rec["image"]
            instances = [TextInstance.from_dict(inst) for inst in rec.get("instances", [])]
        except (KeyError, TypeError, AnnotationError) as e:
            raise AnnotationError(f"{path}: record {i}: {e}") from e
        if image in seen:
            raise AnnotationError(f"{path}: duplicate image id {image!r} at record {i}")
        seen.add(image)
        records.append(AnnotationRecord(image=image, instances=instances))
    return records
