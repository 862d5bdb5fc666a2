"""Zero out image regions (patch drop)."""

from __future__ import annotations

import math

import numpy as np

from .schema import Disk, ImageSample, Rect


def region_mask(shape: tuple[int, int], region: Rect | Disk | None) -> np.ndarray:
    """Boolean mask of the pixels covered by ``region``, clipped to the image."""
    H, W = shape
    mask = np.zeros((H, W), dtype=bool)
    if region is None:
        return mask
    if isinstance(region, Rect):
        r0 = max(0, math.ceil(region.top))
        r1 = min(H - 1, math.floor(region.bottom))
        c0 = max(0, math.ceil(region.left))
        c1 = min(W - 1, math.floor(region.right))
        if r0 <= r1 and c0 <= c1:
            mask[r0 : r1 + 1, c0 : c1 + 1] = True
        return mask
    if isinstance(region, Disk):
        rr, cc = np.ogrid[0:H, 0:W]
        return (rr - region.row) ** 2 + (cc - region.col) ** 2 <= region.radius**2
    raise TypeError(f"unsupported region type {type(region).__name__}")


def random_like(
    region: Rect | Disk, shape: tuple[int, int], rng: np.random.Generator
) -> Rect | Disk:
    """A region of the same size placed uniformly at random fully inside the image."""
    H, W = shape
    if isinstance(region, Rect):
        h = int(round(region.bottom - region.top))
        w = int(round(region.right - region.left))
        h, w = min(h, H - 1), min(w, W - 1)
        top = int(rng.integers(0, H - h))
        left = int(rng.integers(0, W - w))
        return Rect(float(top), float(left), float(top + h), float(left + w))
    rad = region.radius
    # integer radius margin keeps the whole disk (and its pixel count) inside
    m = int(math.floor(rad))
    lo_r, hi_r = m, H - 1 - m
    lo_c, hi_c = m, W - 1 - m
    if lo_r > hi_r or lo_c > hi_c:
        return Disk(float((H - 1) // 2), float((W - 1) // 2), rad)
    return Disk(float(rng.integers(lo_r, hi_r + 1)), float(rng.integers(lo_c, hi_c + 1)), rad)


def apply_patch_drop(
    sample: ImageSample,
    region: Rect | Disk | None,
    mode: str = "related",
    rng: np.random.Generator | int | None = None,
) -> ImageSample:
    """Return a copy of ``sample`` with ``region`` (or a same-size random region) zeroed.

    ``mode="random"`` draws the replacement region from ``rng`` (a Generator or
    an integer seed). The input sample is never modified.
    """
    if mode not in ("related", "random"):
        raise ValueError(f"mode must be 'related' or 'random', got {mode!r}")
    shape = sample.pixels.shape[:2]
    if mode == "random" and region is not None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        region = random_like(region, shape, rng)
    mask = region_mask(shape, region)
    pixels = sample.pixels.copy()
    pixels[mask] = 0
    return ImageSample(pixels, sample.concept_labels.copy(), sample.category, sample.parts, sample.sample_id)
