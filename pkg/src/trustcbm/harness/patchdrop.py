"""Concept accuracy before and after zeroing the image region of each part."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import Dataset, Disk, apply_patch_drop
from .training import predict

MODES = ("none", "related", "random")


class PatchDropError(ValueError):
    pass


@dataclass
class GroupDrop:
    part_id: int
    part_name: str
    concepts: list[int]
    images: int
    accuracy: dict[str, float]

    def delta(self, mode: str) -> float:
        return self.accuracy["none"] - self.accuracy[mode]


@dataclass
class PatchDropReport:
    groups: list[GroupDrop]
    aggregate: dict[str, float]
    config: dict = field(default_factory=dict)

    def reduction(self, mode: str) -> float:
        """Aggregate accuracy drop of ``mode`` relative to no drop."""
        return self.aggregate["none"] - self.aggregate[mode]

    def to_dict(self) -> dict:
        return {
            "groups": [
                {
                    "part_id": g.part_id,
                    "part_name": g.part_name,
                    "concepts": g.concepts,
                    "images": g.images,
                    "accuracy": g.accuracy,
                    "delta": {m: g.delta(m) for m in g.accuracy if m != "none"},
                }
                for g in self.groups
            ],
            "aggregate": self.aggregate,
            "aggregate_delta": {m: self.reduction(m) for m in self.aggregate if m != "none"},
            "config": self.config,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def save_csv(self, path: str | Path) -> None:
        modes = list(self.aggregate)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["part_id", "part_name", "images", *modes])
            for g in self.groups:
                w.writerow([g.part_id, g.part_name, g.images, *(g.accuracy[m] for m in modes)])
            w.writerow(["all", "aggregate", "", *(self.aggregate[m] for m in modes)])


def _drop_region(part, point_radius: float):
    # point annotations (CUB) have no extent: drop a disk around them instead
    if part.region.is_degenerate:
        return Disk(part.center[0], part.center[1], point_radius)
    return part.region


def patch_drop_experiment(
    model,
    dataset: Dataset,
    groups: list[list[int]] | None = None,
    modes: tuple[str, ...] = MODES,
    seed: int = 0,
    point_radius: float | None = None,
    batch_size: int = 64,
) -> PatchDropReport:
    """Per-group concept accuracy with no drop, the group's part region zeroed, or a same-size random region zeroed.

    For group g only images whose part annotation is visible count, and only
    the concepts of g are scored. The aggregate is the mean over groups.
    """
    for m in modes:
        if m not in MODES:
            raise PatchDropError(f"unknown drop mode {m!r}; choose from {MODES}")
    if "none" not in modes:
        modes = ("none", *modes)
    if len(dataset) == 0:
        raise PatchDropError("empty dataset")
    schema = dataset.schema
    groups = schema.groups if groups is None else groups
    H, W = dataset.image_size
    radius = point_radius if point_radius is not None else 0.1 * min(H, W)
    results = []
    for gi, group in enumerate(groups):
        part_id = schema.part_of(group[0])
        if any(schema.part_of(c) != part_id for c in group):
            raise PatchDropError(f"group {gi} spans several parts")
        idx, regions = [], []
        for n, s in enumerate(dataset.samples):
            part = s.part(part_id)
            if part is None:
                raise PatchDropError(f"image {s.sample_id!r} has no annotation for part {part_id}")
            if part.visible:
                idx.append(n)
                regions.append(_drop_region(part, radius))
        acc = {}
        labels = dataset.concept_matrix()[idx][:, group] == 1
        for mode in modes:
            rng = np.random.default_rng([seed, gi])
            images = []
            for n, region in zip(idx, regions):
                s = dataset.samples[n]
                if mode == "none":
                    images.append(s.image)
                else:
                    images.append(apply_patch_drop(s, region, mode, rng).image)
            if images:
                probs, _ = predict(model, np.stack(images), batch_size)
                acc[mode] = float(np.mean((probs[:, group] > 0.5) == labels))
            else:
                acc[mode] = math.nan
        results.append(GroupDrop(part_id, schema.part_name(part_id), list(group), len(idx), acc))
    scored = [g for g in results if g.images > 0]
    if not scored:
        raise PatchDropError("no group has a visible part annotation")
    aggregate = {m: math.fsum(g.accuracy[m] for g in scored) / len(scored) for m in modes}
    config = {"seed": seed, "point_radius": radius, "modes": list(modes)}
    return PatchDropReport(results, aggregate, config)
