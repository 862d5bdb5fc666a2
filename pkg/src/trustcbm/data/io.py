"""On-disk dataset format: ``manifest.json`` plus one PNG per sample under ``images/``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .schema import ConceptSchema, DataError, Dataset, ImageSample, PartAnnotation

MANIFEST_VERSION = 1


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (s, split) in enumerate(zip(dataset.samples, dataset.splits)):
        fname = f"images/{i:05d}.png"
        # pnginfo left empty so files carry no timestamps
        Image.fromarray(s.pixels, mode="RGB").save(root / fname, format="PNG", optimize=False)
        records.append(
            {
                "id": s.sample_id,
                "file": fname,
                "split": split,
                "category": int(s.category),
                "concepts": [int(v) for v in s.concept_labels],
                "parts": [p.to_dict() for p in s.parts],
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "schema": dataset.schema.to_dict(),
        "meta": dataset.meta,
        "samples": records,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    schema = ConceptSchema.from_dict(manifest["schema"])
    samples, splits = [], []
    for rec in manifest["samples"]:
        with Image.open(root / rec["file"]) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        samples.append(
            ImageSample(
                pixels=pixels,
                concept_labels=np.asarray(rec["concepts"], dtype=np.uint8),
                category=int(rec["category"]),
                parts=tuple(PartAnnotation.from_dict(p) for p in rec["parts"]),
                sample_id=str(rec["id"]),
            )
        )
        splits.append(str(rec["split"]))
    return Dataset(tuple(samples), schema, tuple(splits), manifest.get("meta", {}))


def dataset_digest(dataset: Dataset) -> str:
    """SHA-256 over schema, labels, annotations and raw pixels."""
    h = hashlib.sha256()
    h.update(json.dumps(dataset.schema.to_dict(), sort_keys=True).encode())
    for s, split in zip(dataset.samples, dataset.splits):
        rec = {
            "id": s.sample_id,
            "split": split,
            "category": int(s.category),
            "concepts": [int(v) for v in s.concept_labels],
            "parts": [p.to_dict() for p in s.parts],
            "shape": list(s.pixels.shape),
        }
        h.update(json.dumps(rec, sort_keys=True).encode())
        h.update(np.ascontiguousarray(s.pixels).tobytes())
    return h.hexdigest()
