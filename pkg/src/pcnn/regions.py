"""Proportional face segmentation and stitching of per-region feature maps.

A layout is a list of rectangles given as fractions of the image height and
width. Scaling a layout to a concrete size floors every fractional boundary,
so the same layout produces consistent rectangles at image resolution and at
feature-map resolution. The right and bottom regions absorb the remainder.

Five-region order: top-left eye and eyebrow, top-right eye and eyebrow, left
zygomatic, right zygomatic, mouth (full width).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ImageTooSmall, InvalidShape, TargetTooSmall
from .kernels import bilinear_resize, crop, paste
from .tensor import Tensor

Rect = Tuple[int, int, int, int]
FracRect = Tuple[float, float, float, float]

REGION_NAMES = ("eye_left", "eye_right", "zygomatic_left", "zygomatic_right", "mouth")
MIN_EXTENT = 8


@dataclass(frozen=True)
class RegionSpec:
    b1: float = 0.5
    b2: float = 0.65
    wsplit: float = 0.5

    def __post_init__(self):
        if not (0 < self.b1 < self.b2 < 1):
            raise ValueError(f"need 0 < b1 < b2 < 1, got b1={self.b1}, b2={self.b2}")
        if not (0 < self.wsplit < 1):
            raise ValueError(f"need 0 < wsplit < 1, got {self.wsplit}")

    def fractions(self) -> List[FracRect]:
        b1, b2, c = self.b1, self.b2, self.wsplit
        return [
            (0.0, b1, 0.0, c),
            (0.0, b1, c, 1.0),
            (b1, b2, 0.0, c),
            (b1, b2, c, 1.0),
            (b2, 1.0, 0.0, 1.0),
        ]

    @classmethod
    def from_heights(cls, h: int, h1: int, h2: int, wsplit: float = 0.5) -> "RegionSpec":
        """Build a spec from absolute band boundaries, e.g. ``(20, 10, 13)``."""
        return cls(h1 / h, h2 / h, wsplit)


def _scale(f: float, n: int) -> int:
    return n if f >= 1.0 else int(math.floor(f * n))


@dataclass(frozen=True)
class RegionSet:
    rects: Tuple[Rect, ...]
    fractions: Tuple[FracRect, ...]
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.rects)

    def __iter__(self):
        return iter(self.rects)

    def __getitem__(self, i: int) -> Rect:
        return self.rects[i]

    def scaled(self, h: int, w: int) -> "RegionSet":
        return layout_regions(h, w, self.fractions)

    def is_tiling(self) -> bool:
        cover = np.zeros((self.height, self.width), dtype=np.int64)
        for r0, r1, c0, c1 in self.rects:
            cover[r0:r1, c0:c1] += 1
        return bool((cover == 1).all())

    def index_image(self) -> np.ndarray:
        """H x W array holding the 1-based region index of each cell (0 if uncovered)."""
        img = np.zeros((self.height, self.width), dtype=np.int64)
        for k, (r0, r1, c0, c1) in enumerate(self.rects, start=1):
            img[r0:r1, c0:c1] = k
        return img


def layout_regions(h: int, w: int, fractions: Sequence[FracRect]) -> RegionSet:
    """Scale fractional rectangles to an h x w grid by flooring each boundary."""
    rects = []
    for fr in fractions:
        r0, r1 = _scale(fr[0], h), _scale(fr[1], h)
        c0, c1 = _scale(fr[2], w), _scale(fr[3], w)
        rects.append((r0, r1, c0, c1))
    return RegionSet(tuple(rects), tuple(tuple(f) for f in fractions), h, w)


def compute_regions(h: int, w: int, spec: RegionSpec = RegionSpec()) -> RegionSet:
    if h < MIN_EXTENT or w < MIN_EXTENT:
        raise ImageTooSmall(f"image {h}x{w} is below {MIN_EXTENT}x{MIN_EXTENT}")
    regions = layout_regions(h, w, spec.fractions())
    for r0, r1, c0, c1 in regions:
        if r1 <= r0 or c1 <= c0:
            raise ImageTooSmall(f"region {(r0, r1, c0, c1)} is empty for a {h}x{w} image")
    return regions


def crop_regions(image: Tensor, regions: RegionSet) -> List[Tensor]:
    if image.data.ndim != 4 or image.shape[2:] != (regions.height, regions.width):
        raise InvalidShape(f"regions computed for {regions.height}x{regions.width}, image is {image.shape}")
    return [crop(image, r) for r in regions]


def stitch_features(features: Sequence[Tensor], regions: RegionSet, target: Tuple[int, int],
                    fill: float = 0.0) -> Tensor:
    """Resize each region's feature map into its rectangle of the scaled layout and paste."""
    if len(features) != len(regions):
        raise InvalidShape(f"{len(features)} feature maps for {len(regions)} regions")
    n, c = features[0].shape[:2]
    for f in features:
        if f.data.ndim != 4 or f.shape[:2] != (n, c):
            raise InvalidShape("feature maps must share batch size and channel count")
    layout = regions.scaled(*target)
    for r0, r1, c0, c1 in layout:
        if r1 <= r0 or c1 <= c0:
            raise TargetTooSmall(f"region {(r0, r1, c0, c1)} is empty at feature size {target}")
    tiles = [bilinear_resize(f, (r1 - r0, c1 - c0)) for f, (r0, r1, c0, c1) in zip(features, layout)]
    return paste(tiles, list(layout), target, fill=fill)
