"""Procedural part-annotated dataset: colored glyphs on a textured background.

Each object has ``len(parts)`` parts, every part is drawn as its own glyph
(circle, triangle, square, diamond, ...) near a fixed anchor, and each part's
fill color is its attribute. A concept is one (part, color) pair, so
``C = len(parts) * len(colors)``. A category fixes one color per part.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .schema import Concept, ConceptSchema, DataError, Dataset, ImageSample, PartAnnotation, Rect

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.86, 0.14, 0.12),
    "green": (0.16, 0.74, 0.22),
    "blue": (0.18, 0.30, 0.92),
    "yellow": (0.93, 0.85, 0.15),
    "magenta": (0.85, 0.20, 0.80),
    "cyan": (0.15, 0.82, 0.85),
}

SHAPES = ("circle", "triangle", "square", "diamond", "cross", "ring")


class GenerationError(DataError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int = 96
    parts: tuple[str, ...] = ("head", "wing", "body", "tail")
    colors: tuple[str, ...] = ("red", "green", "blue")
    num_categories: int = 8
    samples_per_category: int = 50
    test_samples_per_category: int = 25
    glyph_size: int = 20
    jitter: int = 12
    seed: int = 0
    anchors: tuple[tuple[int, int], ...] | None = field(default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parts"] = list(self.parts)
        d["colors"] = list(self.colors)
        d["anchors"] = [list(a) for a in self.resolved_anchors()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorSpec:
        d = dict(d)
        d["parts"] = tuple(d["parts"])
        d["colors"] = tuple(d["colors"])
        if d.get("anchors") is not None:
            d["anchors"] = tuple(tuple(int(v) for v in a) for a in d["anchors"])
        return cls(**d)

    @property
    def num_concepts(self) -> int:
        return len(self.parts) * len(self.colors)

    def resolved_anchors(self) -> tuple[tuple[int, int], ...]:
        if self.anchors is not None:
            return self.anchors
        g = math.ceil(math.sqrt(len(self.parts)))
        step = self.image_size / g
        out = []
        for i in range(len(self.parts)):
            r, c = divmod(i, g)
            out.append((int(round((r + 0.5) * step)), int(round((c + 0.5) * step))))
        return tuple(out)


def synthetic_schema(spec: GeneratorSpec) -> ConceptSchema:
    concepts = []
    for p, part in enumerate(spec.parts):
        for color in spec.colors:
            concepts.append(Concept(len(concepts), p, f"{part}::{color}"))
    return ConceptSchema(tuple(concepts), tuple(enumerate(spec.parts)))


def _check_spec(spec: GeneratorSpec) -> None:
    if not spec.parts or not spec.colors:
        raise GenerationError("need at least one part and one color")
    unknown = [c for c in spec.colors if c not in PALETTE]
    if unknown:
        raise GenerationError(f"unknown colors {unknown}; choose from {sorted(PALETTE)}")
    if len(spec.parts) > len(SHAPES):
        raise GenerationError(f"at most {len(SHAPES)} parts supported")
    if spec.num_categories < 1:
        raise GenerationError("num_categories must be >= 1")
    if spec.num_categories > len(spec.colors) ** len(spec.parts):
        raise GenerationError(
            f"num_categories={spec.num_categories} exceeds the {len(spec.colors) ** len(spec.parts)} "
            "distinct color assignments"
        )
    if spec.samples_per_category < 0 or spec.test_samples_per_category < 0:
        raise GenerationError("sample counts must be non-negative")
    if spec.glyph_size < 3 or spec.jitter < 0:
        raise GenerationError("glyph_size must be >= 3 and jitter >= 0")
    anchors = spec.resolved_anchors()
    if len(anchors) != len(spec.parts):
        raise GenerationError("one anchor per part required")
    s, j, H = spec.glyph_size, spec.jitter, spec.image_size
    half = s // 2
    for i, (r, c) in enumerate(anchors):
        lo_r, hi_r = r - j - half, r + j - half + s - 1
        lo_c, hi_c = c - j - half, c + j - half + s - 1
        if lo_r < 0 or lo_c < 0 or hi_r > H - 1 or hi_c > H - 1:
            raise GenerationError(
                f"infeasible placement: part {spec.parts[i]!r} at anchor {(r, c)} with jitter {j} "
                f"and glyph size {s} can leave the {H}x{H} image"
            )
    for a, b in itertools.combinations(range(len(anchors)), 2):
        dr = abs(anchors[a][0] - anchors[b][0])
        dc = abs(anchors[a][1] - anchors[b][1])
        if dr < s + 2 * j and dc < s + 2 * j:
            raise GenerationError(
                f"infeasible placement: parts {spec.parts[a]!r} and {spec.parts[b]!r} may overlap "
                f"(anchor distance {(dr, dc)} < glyph size + 2*jitter = {s + 2 * j})"
            )


def glyph_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size mask of a glyph centered in its box."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    m = (size - 1) / 2.0
    rad = size / 2.0
    if shape == "circle":
        mask = (r - m) ** 2 + (c - m) ** 2 <= rad**2
    elif shape == "triangle":
        # apex at the top row, base on the bottom row
        half_w = (r + 1) / size * rad
        mask = np.abs(c - m) <= half_w
    elif shape == "square":
        mask = np.ones((size, size), dtype=bool)
    elif shape == "diamond":
        mask = np.abs(r - m) + np.abs(c - m) <= rad
    elif shape == "cross":
        arm = max(1.0, size / 6.0)
        mask = (np.abs(r - m) <= arm) | (np.abs(c - m) <= arm)
    elif shape == "ring":
        d2 = (r - m) ** 2 + (c - m) ** 2
        mask = (d2 <= rad**2) & (d2 >= (rad * 0.5) ** 2)
    else:
        raise GenerationError(f"unknown glyph shape {shape!r}")
    return mask


def _background(rng: np.random.Generator, H: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.65)
    freq = rng.uniform(0.05, 0.25)
    theta = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    r, c = np.mgrid[0:H, 0:H].astype(np.float64)
    stripes = 0.06 * np.sin(freq * (r * math.cos(theta) + c * math.sin(theta)) + phase)
    noise = rng.uniform(-0.08, 0.08, size=(H, H))
    gray = np.clip(base + stripes + noise, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_sample(
    spec: GeneratorSpec,
    color_choice: tuple[int, ...],
    rng: np.random.Generator,
) -> tuple[np.ndarray, tuple[PartAnnotation, ...]]:
    H, s, j = spec.image_size, spec.glyph_size, spec.jitter
    img = _background(rng, H)
    anchors = spec.resolved_anchors()
    annotations = []
    for p, (ar, ac) in enumerate(anchors):
        dr, dc = rng.integers(-j, j + 1, size=2)
        top = int(ar + dr - s // 2)
        left = int(ac + dc - s // 2)
        mask = glyph_mask(SHAPES[p], s)
        shade = rng.uniform(0.9, 1.0)
        color = np.clip(np.array(PALETTE[spec.colors[color_choice[p]]]) * shade, 0.0, 1.0)
        view = img[top : top + s, left : left + s]
        view[mask] = color
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        region = Rect(
            float(top + rows[0]), float(left + cols[0]), float(top + rows[-1]), float(left + cols[-1])
        )
        center = ((region.top + region.bottom) / 2.0, (region.left + region.right) / 2.0)
        annotations.append(PartAnnotation(p, center, region, True))
    return _to_uint8(img), tuple(annotations)


def category_table(spec: GeneratorSpec) -> np.ndarray:
    """(K, P) color index per part for every category, seeded by ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 0xC0])
    n_assign = len(spec.colors) ** len(spec.parts)
    picks = rng.choice(n_assign, size=spec.num_categories, replace=False)
    table = np.zeros((spec.num_categories, len(spec.parts)), dtype=np.int64)
    for k, code in enumerate(sorted(int(v) for v in picks)):
        for p in range(len(spec.parts) - 1, -1, -1):
            code, table[k, p] = divmod(code, len(spec.colors))
    return table


def generate_synthetic_dataset(spec: GeneratorSpec) -> Dataset:
    """Render ``spec`` into a Dataset; a pure function of ``spec``."""
    _check_spec(spec)
    schema = synthetic_schema(spec)
    table = category_table(spec)
    n_colors = len(spec.colors)
    rng = np.random.default_rng([spec.seed, 0x5A])
    samples, splits = [], []
    plan = [("train", spec.samples_per_category), ("test", spec.test_samples_per_category)]
    for split, n in plan:
        for _ in range(n):
            for k in range(spec.num_categories):
                choice = tuple(int(v) for v in table[k])
                pixels, parts = render_sample(spec, choice, rng)
                labels = np.zeros(schema.num_concepts, dtype=np.uint8)
                for p, color_idx in enumerate(choice):
                    labels[p * n_colors + color_idx] = 1
                samples.append(
                    ImageSample(pixels, labels, k, parts, sample_id=f"{len(samples):05d}")
                )
                splits.append(split)
    meta = {"source": "synthetic", "num_categories": spec.num_categories, "generator": spec.to_dict()}
    return Dataset(tuple(samples), schema, tuple(splits), meta)
