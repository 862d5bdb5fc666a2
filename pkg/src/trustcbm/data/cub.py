"""Ingestion of CUB-200-2011 style annotation directories.

Expected layout under ``root``::

    images.txt                               <image_id> <relative path under images/>
    images/...
    bounding_boxes.txt                       <image_id> <x> <y> <w> <h>
    train_test_split.txt                     <image_id> <is_train>
    parts/part_locs.txt                      <image_id> <part_id> <x> <y> <visible>
    parts/parts.txt                          optional: <part_id> <name ...>
    attributes/image_attribute_labels.txt    <image_id> <attribute_id> <is_present> <certainty> <time>
    attributes/attribute_part_map.txt        <attribute_id> <part_id>
    attributes/attributes.txt                optional: <attribute_id> <name>

``attribute_part_map.txt`` is not part of the original release. When absent,
the map shipped with this package (``resources/cub_attribute_part_map.txt``)
is used. Lines starting with ``#`` are ignored in every file.

Coordinates in the CUB files are (x, y); everything produced here is (row, col).
"""

from __future__ import annotations

import logging
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .schema import Concept, ConceptSchema, DataError, Dataset, ImageSample, PartAnnotation, Rect

log = logging.getLogger(__name__)

CUB_PART_NAMES = {
    1: "back",
    2: "beak",
    3: "belly",
    4: "breast",
    5: "crown",
    6: "forehead",
    7: "left eye",
    8: "left leg",
    9: "left wing",
    10: "nape",
    11: "right eye",
    12: "right leg",
    13: "right wing",
    14: "tail",
    15: "throat",
}


class IngestionError(DataError):
    pass


def default_attribute_part_map() -> str:
    return resources.files("trustcbm.data").joinpath("resources/cub_attribute_part_map.txt").read_text()


def _parse_lines(text: str, source: str, nfields: int | None, min_fields: int | None = None):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if nfields is not None and len(fields) != nfields:
            raise IngestionError(f"{source}:{lineno}: expected {nfields} fields, got {len(fields)}: {raw!r}")
        if min_fields is not None and len(fields) < min_fields:
            raise IngestionError(f"{source}:{lineno}: expected at least {min_fields} fields: {raw!r}")
        yield lineno, fields


def _read(root: Path, rel: str) -> tuple[str, str]:
    path = root / rel
    if not path.parent.is_dir():
        raise IngestionError(f"missing directory: {path.parent}")
    if not path.is_file():
        raise IngestionError(f"missing file: {path}")
    return path.read_text(), str(path)


def _num(value: str, source: str, lineno: int, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise IngestionError(f"{source}:{lineno}: cannot parse {value!r} as {kind.__name__}") from None


def load_cub_annotations(
    root: str | Path,
    crop_to_bbox: bool = True,
    image_size: int = 224,
) -> Dataset:
    """Read a CUB-format directory into a Dataset of ``image_size`` square images.

    With ``crop_to_bbox`` each image is cropped to its bounding box before the
    resize, otherwise the whole image is resized. Part points are mapped with
    the same crop offset and scale; points that fall outside the result are
    marked invisible. Concept labels whose owning part is invisible are
    cleared, so a positive label always has a usable location.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"missing directory: {root}")

    text, src = _read(root, "images.txt")
    paths: dict[int, str] = {}
    for lineno, f in _parse_lines(text, src, None, min_fields=2):
        paths[_num(f[0], src, lineno, int)] = " ".join(f[1:])
    image_ids = sorted(paths)
    known = set(image_ids)

    def check_image(image_id: int, source: str, lineno: int) -> None:
        if image_id not in known:
            raise IngestionError(f"{source}:{lineno}: unknown image id {image_id}")

    text, src = _read(root, "bounding_boxes.txt")
    bboxes: dict[int, tuple[float, float, float, float]] = {}
    for lineno, f in _parse_lines(text, src, 5):
        iid = _num(f[0], src, lineno, int)
        check_image(iid, src, lineno)
        x, y, w, h = (_num(v, src, lineno) for v in f[1:])
        if w <= 0 or h <= 0:
            raise IngestionError(f"{src}:{lineno}: non-positive box size")
        bboxes[iid] = (x, y, w, h)

    text, src = _read(root, "train_test_split.txt")
    is_train: dict[int, bool] = {}
    for lineno, f in _parse_lines(text, src, 2):
        iid = _num(f[0], src, lineno, int)
        check_image(iid, src, lineno)
        is_train[iid] = _num(f[1], src, lineno, int) == 1

    part_names = dict(CUB_PART_NAMES)
    if (root / "parts" / "parts.txt").is_file():
        text, src = _read(root, "parts/parts.txt")
        part_names = {}
        for lineno, f in _parse_lines(text, src, None, min_fields=2):
            part_names[_num(f[0], src, lineno, int)] = " ".join(f[1:])

    text, src = _read(root, "parts/part_locs.txt")
    locs: dict[int, dict[int, tuple[float, float, bool]]] = {}
    for lineno, f in _parse_lines(text, src, 5):
        iid, pid = _num(f[0], src, lineno, int), _num(f[1], src, lineno, int)
        check_image(iid, src, lineno)
        if pid not in part_names:
            raise IngestionError(f"{src}:{lineno}: unknown part id {pid}")
        x, y = _num(f[2], src, lineno), _num(f[3], src, lineno)
        visible = _num(f[4], src, lineno, int) == 1
        locs.setdefault(iid, {})[pid] = (y, x, visible)

    map_path = root / "attributes" / "attribute_part_map.txt"
    if not (root / "attributes").is_dir():
        raise IngestionError(f"missing directory: {root / 'attributes'}")
    if map_path.is_file():
        map_text, map_src = map_path.read_text(), str(map_path)
    else:
        log.info("%s not found; using the packaged attribute-part map", map_path)
        map_text, map_src = default_attribute_part_map(), "<packaged cub_attribute_part_map.txt>"
    attr_part: dict[int, int] = {}
    for lineno, f in _parse_lines(map_text, map_src, 2):
        aid, pid = _num(f[0], map_src, lineno, int), _num(f[1], map_src, lineno, int)
        if pid not in part_names:
            raise IngestionError(f"{map_src}:{lineno}: unknown part id {pid}")
        attr_part[aid] = pid

    attr_names: dict[int, str] = {}
    if (root / "attributes" / "attributes.txt").is_file():
        text, src = _read(root, "attributes/attributes.txt")
        for lineno, f in _parse_lines(text, src, None, min_fields=2):
            attr_names[_num(f[0], src, lineno, int)] = " ".join(f[1:])

    attr_ids = sorted(attr_part)
    concept_of = {aid: i for i, aid in enumerate(attr_ids)}
    used_parts = sorted({attr_part[a] for a in attr_ids})
    schema = ConceptSchema(
        concepts=tuple(
            Concept(i, attr_part[aid], attr_names.get(aid, f"attribute_{aid}")) for i, aid in enumerate(attr_ids)
        ),
        parts=tuple((pid, part_names[pid]) for pid in used_parts),
    )

    text, src = _read(root, "attributes/image_attribute_labels.txt")
    labels = {iid: np.zeros(len(attr_ids), dtype=np.uint8) for iid in image_ids}
    for lineno, f in _parse_lines(text, src, 5):
        iid, aid = _num(f[0], src, lineno, int), _num(f[1], src, lineno, int)
        check_image(iid, src, lineno)
        present = _num(f[2], src, lineno, int)
        if present not in (0, 1):
            raise IngestionError(f"{src}:{lineno}: is_present must be 0 or 1")
        if attr_names and aid not in attr_names:
            raise IngestionError(f"{src}:{lineno}: unknown attribute id {aid}")
        if aid in concept_of and present:
            labels[iid][concept_of[aid]] = 1

    samples, splits = [], []
    for iid in image_ids:
        if iid not in bboxes:
            raise IngestionError(f"{root / 'bounding_boxes.txt'}: no box for image {iid}")
        if iid not in is_train:
            raise IngestionError(f"{root / 'train_test_split.txt'}: no split for image {iid}")
        img_path = root / "images" / paths[iid]
        if not img_path.is_file():
            raise IngestionError(f"missing image file: {img_path}")
        with Image.open(img_path) as im:
            im = im.convert("RGB")
            W0, H0 = im.size
            if crop_to_bbox:
                x, y, w, h = bboxes[iid]
                left = max(0, int(np.floor(x)))
                top = max(0, int(np.floor(y)))
                right = min(W0, int(np.ceil(x + w)))
                bottom = min(H0, int(np.ceil(y + h)))
                im = im.crop((left, top, right, bottom))
            else:
                left, top, right, bottom = 0, 0, W0, H0
            im = im.resize((image_size, image_size), Image.BILINEAR)
            pixels = np.asarray(im, dtype=np.uint8).copy()
        scale_r = image_size / (bottom - top)
        scale_c = image_size / (right - left)

        parts = []
        lbl = labels[iid].copy()
        for pid in used_parts:
            row, col, visible = locs.get(iid, {}).get(pid, (0.0, 0.0, False))
            if visible:
                row = (row - top) * scale_r
                col = (col - left) * scale_c
                if not (0 <= row <= image_size - 1 and 0 <= col <= image_size - 1):
                    visible = False
            if not visible:
                row, col = 0.0, 0.0
            parts.append(PartAnnotation(pid, (row, col), Rect(row, col, row, col), visible))
            if not visible:
                for cid, c in enumerate(schema.concepts):
                    if c.part_id == pid:
                        lbl[cid] = 0
        # CUB class is the leading "NNN." of the image folder
        folder = paths[iid].split("/")[0]
        try:
            category = int(folder.split(".")[0]) - 1
        except ValueError:
            raise IngestionError(f"{root / 'images.txt'}: cannot read class from {paths[iid]!r}") from None
        samples.append(ImageSample(pixels, lbl, category, tuple(parts), sample_id=str(iid)))
        splits.append("train" if is_train[iid] else "test")

    meta = {
        "source": "cub",
        "crop_to_bbox": crop_to_bbox,
        "image_size": image_size,
        "num_categories": 1 + max((s.category for s in samples), default=-1),
    }
    return Dataset(tuple(samples), schema, tuple(splits), meta)
