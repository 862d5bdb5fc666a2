"""Concept trustworthiness score.

For every (image, concept) pair with the concept present, the concept's
localization map is upsampled to image size, a fixed-size box is centered on
its maximum, and the pair counts as trustworthy when the ground-truth part
location lies inside that box. Rates are averaged per concept, then over
concepts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data.schema import Dataset, Rect

DEFAULT_BOX_FRACTION = 90 / 224


class MetricError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoxSpec:
    """Box side as a fraction of the image side, or absolute ``height`` x ``width`` pixels."""

    fraction: float | None = DEFAULT_BOX_FRACTION
    height: int | None = None
    width: int | None = None

    def resolve(self, H: int, W: int) -> tuple[int, int]:
        if self.height is not None or self.width is not None:
            if self.height is None or self.width is None:
                raise MetricError("absolute box needs both height and width")
            hb, wb = int(self.height), int(self.width)
        else:
            if self.fraction is None or not 0 < self.fraction <= 1:
                raise MetricError(f"box fraction must be in (0, 1], got {self.fraction}")
            hb = max(1, int(round(self.fraction * H)))
            wb = max(1, int(round(self.fraction * W)))
        if not (1 <= hb <= H and 1 <= wb <= W):
            raise MetricError(f"box {hb}x{wb} does not fit a {H}x{W} image")
        return hb, wb

    def to_dict(self) -> dict:
        return asdict(self)


def upsample_map(values: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel (i, j) samples the source at
    ``(i·(H_l - 1)/(H - 1), j·(W_l - 1)/(W - 1))`` (0 when the output side is 1),
    so the four corner values are preserved exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    Hl, Wl = values.shape
    if H < Hl or W < Wl:
        raise MetricError(f"cannot upsample {Hl}x{Wl} to a smaller {H}x{W}")

    def axis(n_out: int, n_in: int):
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(H, Hl)
    c0, c1, fc = axis(W, Wl)
    top = values[r0][:, c0] * (1 - fc) + values[r0][:, c1] * fc
    bottom = values[r1][:, c0] * (1 - fc) + values[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def corresponding_region(upsampled: np.ndarray, box: BoxSpec | tuple[int, int]) -> Rect:
    """Box of the configured size centered on the map's maximum, shifted to stay inside.

    The first maximum in row-major order wins ties. For an even side the
    center pixel sits just above/left of the middle: rows
    ``[r - (H_b - 1) // 2, r + H_b // 2]``.
    """
    H, W = upsampled.shape
    hb, wb = box.resolve(H, W) if isinstance(box, BoxSpec) else box
    r, c = divmod(int(np.argmax(upsampled)), W)
    top = min(max(r - (hb - 1) // 2, 0), H - hb)
    left = min(max(c - (wb - 1) // 2, 0), W - wb)
    return Rect(float(top), float(left), float(top + hb - 1), float(left + wb - 1))


def region_contains(box: Rect, target: Rect | tuple[float, float]) -> bool:
    """Closed-interval containment of a point (row, col) or of all four corners of a rectangle."""
    if isinstance(target, Rect):
        return box.contains_point(target.top, target.left) and box.contains_point(target.bottom, target.right)
    row, col = target
    return box.contains_point(row, col)


@dataclass
class ConceptRate:
    concept_id: int
    label: str
    images: int
    contained: int

    @property
    def rate(self) -> float:
        return self.contained / self.images


@dataclass
class TrustReport:
    per_concept: list[ConceptRate]
    score: float
    excluded: list[int]
    config: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def rates(self) -> dict[int, float]:
        return {r.concept_id: r.rate for r in self.per_concept}

    def to_dict(self, with_records: bool = False) -> dict:
        d = {
            "score": self.score,
            "per_concept": [
                {"concept_id": r.concept_id, "label": r.label, "images": r.images,
                 "contained": r.contained, "rate": r.rate}
                for r in self.per_concept
            ],
            "excluded": list(self.excluded),
            "config": self.config,
        }
        if with_records:
            d["records"] = self.records
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrustReport:
        return cls(
            per_concept=[ConceptRate(r["concept_id"], r["label"], r["images"], r["contained"]) for r in d["per_concept"]],
            score=d["score"],
            excluded=list(d["excluded"]),
            config=d.get("config", {}),
            records=d.get("records", []),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def save_records_csv(self, path: str | Path) -> None:
        fields = ["sample_id", "concept_id", "box_top", "box_left", "box_bottom", "box_right",
                  "target_row", "target_col", "contained"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for rec in self.records:
                writer.writerow({k: rec[k] for k in fields})


def trust_score(
    localizer: Callable[[np.ndarray], np.ndarray],
    dataset: Dataset,
    box: BoxSpec = BoxSpec(),
    target: str = "point",
    batch_size: int = 32,
    source: str = "",
) -> TrustReport:
    """Score ``localizer`` (float images (B, H, W, 3) -> maps (B, C, H_l, W_l)) on ``dataset``.

    ``target`` selects the ground truth: ``point`` (part center) or
    ``region`` (every corner of the part rectangle). Concepts absent from all
    images are excluded from the mean and listed in ``excluded``.
    """
    if target not in ("point", "region"):
        raise MetricError(f"target must be 'point' or 'region', got {target!r}")
    if len(dataset) == 0:
        raise MetricError("empty dataset")
    schema = dataset.schema
    C = schema.num_concepts
    H, W = dataset.image_size
    hb, wb = box.resolve(H, W)
    counts = np.zeros(C, dtype=np.int64)
    hits = np.zeros(C, dtype=np.int64)
    records: list[dict] = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.samples[start : start + batch_size]
        images = np.stack([s.pixels for s in batch]).astype(np.float32) / 255.0
        try:
            maps = np.asarray(localizer(images))
        except Exception as exc:
            ids = [s.sample_id for s in batch]
            raise MetricError(f"localizer failed on images {ids[0]!r}..{ids[-1]!r}: {exc}") from exc
        if maps.ndim != 4 or maps.shape[:2] != (len(batch), C):
            raise MetricError(f"localizer returned shape {maps.shape}, expected ({len(batch)}, {C}, H_l, W_l)")
        for s, sample_maps in zip(batch, maps):
            for c in np.flatnonzero(s.concept_labels):
                part = s.part(schema.part_of(int(c)))
                if part is None or not part.visible:
                    continue
                values = sample_maps[c]
                if not np.isfinite(values).all():
                    raise MetricError(f"non-finite localization map for image {s.sample_id!r}, concept {c}")
                region = corresponding_region(upsample_map(values, H, W), (hb, wb))
                tgt = part.region if target == "region" else part.center
                ok = region_contains(region, tgt)
                counts[c] += 1
                hits[c] += ok
                records.append({
                    "sample_id": s.sample_id, "concept_id": int(c),
                    "box_top": region.top, "box_left": region.left,
                    "box_bottom": region.bottom, "box_right": region.right,
                    "target_row": part.center[0], "target_col": part.center[1],
                    "contained": bool(ok),
                })
    per_concept = [
        ConceptRate(c, schema.concepts[c].label, int(counts[c]), int(hits[c])) for c in range(C) if counts[c] > 0
    ]
    excluded = [c for c in range(C) if counts[c] == 0]
    if not per_concept:
        raise MetricError("no concept has any evaluable image")
    score = math.fsum(r.rate for r in per_concept) / len(per_concept)
    config = {"box": box.to_dict(), "box_pixels": [hb, wb], "target": target, "source": source}
    return TrustReport(per_concept, score, excluded, config, records)
