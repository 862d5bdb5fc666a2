"""Core dataset types: concept schema, part annotations, samples and datasets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for invalid dataset content (schema, annotations, splits)."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in (row, col) pixel coordinates, closed on all sides."""

    top: float
    left: float
    bottom: float
    right: float

    @property
    def height(self) -> float:
        return self.bottom - self.top + 1

    @property
    def width(self) -> float:
        return self.right - self.left + 1

    @property
    def is_degenerate(self) -> bool:
        return self.top == self.bottom and self.left == self.right

    def contains_point(self, row: float, col: float) -> bool:
        return self.top <= row <= self.bottom and self.left <= col <= self.right

    def to_list(self) -> list[float]:
        return [self.top, self.left, self.bottom, self.right]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Rect:
        top, left, bottom, right = values
        return cls(top, left, bottom, right)


@dataclass(frozen=True)
class Disk:
    """Closed disk: pixels with (r - row)^2 + (c - col)^2 <= radius^2."""

    row: float
    col: float
    radius: float


@dataclass(frozen=True)
class Concept:
    concept_id: int
    part_id: int
    label: str


@dataclass(frozen=True)
class ConceptSchema:
    """Ordered concepts, each owned by exactly one part."""

    concepts: tuple[Concept, ...]
    parts: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        part_ids = [pid for pid, _ in self.parts]
        if len(set(part_ids)) != len(part_ids):
            raise DataError("duplicate part ids in schema")
        known = set(part_ids)
        ids = [c.concept_id for c in self.concepts]
        if ids != list(range(len(ids))):
            raise DataError("concept ids must be 0..C-1 in order")
        for c in self.concepts:
            if c.part_id not in known:
                raise DataError(f"concept {c.concept_id} refers to unknown part {c.part_id}")

    @property
    def num_concepts(self) -> int:
        return len(self.concepts)

    def part_of(self, concept_id: int) -> int:
        return self.concepts[concept_id].part_id

    def part_name(self, part_id: int) -> str:
        return dict(self.parts)[part_id]

    @property
    def groups(self) -> list[list[int]]:
        return concept_part_groups(self)

    def to_dict(self) -> dict:
        return {
            "concepts": [[c.concept_id, c.part_id, c.label] for c in self.concepts],
            "parts": [[pid, name] for pid, name in self.parts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConceptSchema:
        return cls(
            concepts=tuple(Concept(int(i), int(p), str(lbl)) for i, p, lbl in d["concepts"]),
            parts=tuple((int(pid), str(name)) for pid, name in d["parts"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def concept_part_groups(schema: ConceptSchema) -> list[list[int]]:
    """Partition concept ids by owning part.

    Groups are ordered by ascending part id, concepts ascending within a group.
    Parts that own no concept do not produce a group.
    """
    by_part: dict[int, list[int]] = {}
    for c in schema.concepts:
        by_part.setdefault(c.part_id, []).append(c.concept_id)
    return [sorted(by_part[pid]) for pid in sorted(by_part)]


@dataclass(frozen=True)
class PartAnnotation:
    part_id: int
    center: tuple[float, float]
    region: Rect
    visible: bool = True

    def to_dict(self) -> dict:
        return {
            "part_id": self.part_id,
            "center": list(self.center),
            "region": self.region.to_list(),
            "visible": self.visible,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PartAnnotation:
        return cls(
            part_id=int(d["part_id"]),
            center=(float(d["center"][0]), float(d["center"][1])),
            region=Rect.from_list([float(v) for v in d["region"]]),
            visible=bool(d["visible"]),
        )


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One annotated image.

    ``pixels`` is the lossless uint8 H x W x 3 storage; ``image`` exposes it as
    float32 in [0, 1].
    """

    pixels: np.ndarray
    concept_labels: np.ndarray
    category: int
    parts: tuple[PartAnnotation, ...]
    sample_id: str = ""

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def part(self, part_id: int) -> PartAnnotation | None:
        for p in self.parts:
            if p.part_id == part_id:
                return p
        return None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.category == other.category
            and self.parts == other.parts
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.concept_labels, other.concept_labels)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[ImageSample, ...]
    schema: ConceptSchema
    splits: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.splits) != len(self.samples):
            raise DataError("one split tag per sample required")
        sizes = {s.pixels.shape for s in self.samples}
        if len(sizes) > 1:
            raise DataError(f"samples have differing image shapes: {sorted(sizes)}")
        C = self.schema.num_concepts
        for s in self.samples:
            if s.concept_labels.shape != (C,):
                raise DataError(f"sample {s.sample_id!r}: expected {C} concept labels")

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.splits == other.splits
            and self.samples == other.samples
        )

    @property
    def image_size(self) -> tuple[int, int] | None:
        return self.samples[0].size if self.samples else None

    @property
    def num_categories(self) -> int:
        return int(self.meta.get("num_categories", 1 + max((s.category for s in self.samples), default=-1)))

    def split(self, name: str) -> Dataset:
        keep = [i for i, tag in enumerate(self.splits) if tag == name]
        return self.select(keep)

    def select(self, indices: Iterable[int]) -> Dataset:
        idx = list(indices)
        return Dataset(
            samples=tuple(self.samples[i] for i in idx),
            schema=self.schema,
            splits=tuple(self.splits[i] for i in idx),
            meta=dict(self.meta),
        )

    def images(self) -> np.ndarray:
        """Stack all images as float32 (N, H, W, 3)."""
        if not self.samples:
            return np.zeros((0, 0, 0, 3), dtype=np.float32)
        return np.stack([s.pixels for s in self.samples]).astype(np.float32) / 255.0

    def concept_matrix(self) -> np.ndarray:
        C = self.schema.num_concepts
        if not self.samples:
            return np.zeros((0, C), dtype=np.int64)
        return np.stack([s.concept_labels for s in self.samples]).astype(np.int64)

    def categories(self) -> np.ndarray:
        return np.array([s.category for s in self.samples], dtype=np.int64)
