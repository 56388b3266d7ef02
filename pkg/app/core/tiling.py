import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from app.core.errors import InvalidParamError, OutOfBoundsError, ShapeMismatchError
from app.core.image import RgbImage
from app.core.types import ClassMap, ProbMap

logger = logging.getLogger(__name__)

DEFAULT_TILE = (500, 500)
DEFAULT_OVERLAP = 0.20
MAX_OVERLAP = 0.9


@dataclass(frozen=True)
class TileRect:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    def as_dict(self) -> Dict[str, int]:
        return {"x0": self.x0, "y0": self.y0, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class TilePlan:
    image_w: int
    image_h: int
    tile_w: int
    tile_h: int
    overlap_frac: float
    rects: Tuple[TileRect, ...]

    def __len__(self) -> int:
        return len(self.rects)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "image": {"width": self.image_w, "height": self.image_h},
            "tile": {"width": self.tile_w, "height": self.tile_h},
            "overlap_frac": self.overlap_frac,
            "rects": [r.as_dict() for r in self.rects],
        }


def _axis_anchors(length: int, tile: int, overlap_frac: float) -> Tuple[List[int], int]:
    if length <= tile:
        return [0], length
    stride = max(1, tile - int(math.floor(overlap_frac * tile + 0.5)))
    anchors = list(range(0, length - tile, stride))
    anchors.append(length - tile)
    return sorted(set(anchors)), tile


def plan_tiles(
    img_w: int,
    img_h: int,
    tile: Tuple[int, int] = DEFAULT_TILE,
    overlap_frac: float = DEFAULT_OVERLAP,
) -> TilePlan:
    """
    Lay out overlapping tiles over an image.

    Anchors advance by tile - round(overlap_frac * tile); the last anchor on
    each axis is pulled back to image - tile so the final tile ends on the
    image edge. An image smaller than the tile becomes a single tile.

    Args:
        img_w: Image width in pixels
        img_h: Image height in pixels
        tile: (width, height) of a tile
        overlap_frac: Overlap between neighbours as a fraction of the tile size

    Returns:
        The plan, rects in row-major order
    """
    tile_w, tile_h = tile
    if tile_w < 1 or tile_h < 1:
        raise InvalidParamError(f"tile dimensions must be positive, got {tile}")
    if img_w < 1 or img_h < 1:
        raise InvalidParamError(f"image dimensions must be positive, got {img_w}x{img_h}")
    if not 0.0 <= overlap_frac <= MAX_OVERLAP:
        raise InvalidParamError(f"overlap_frac must be in [0, {MAX_OVERLAP}], got {overlap_frac}")

    xs, w = _axis_anchors(img_w, tile_w, overlap_frac)
    ys, h = _axis_anchors(img_h, tile_h, overlap_frac)
    rects = tuple(TileRect(x, y, w, h) for y in ys for x in xs)
    return TilePlan(img_w, img_h, tile_w, tile_h, overlap_frac, rects)


def extract_tile(img: RgbImage, rect: TileRect) -> RgbImage:
    if rect.w < 1 or rect.h < 1 or rect.x0 < 0 or rect.y0 < 0 or rect.x1 > img.width or rect.y1 > img.height:
        raise OutOfBoundsError(f"{rect} does not fit in a {img.width}x{img.height} image")
    return RgbImage(img.pixels[rect.y0:rect.y1, rect.x0:rect.x1])


def merge_maps(plan: TilePlan, tiles: Sequence[ProbMap]) -> ClassMap:
    """
    Merge tile probability maps into one class map for the full image.

    Each pixel takes the class and confidence of the covering tile whose top
    class probability is highest there. Ties keep the lowest tile index.
    """
    if len(tiles) != len(plan.rects):
        raise ShapeMismatchError(f"plan has {len(plan.rects)} rects but {len(tiles)} tiles were given")

    best_conf = np.full((plan.image_h, plan.image_w), -1.0, dtype=np.float32)
    labels = np.zeros((plan.image_h, plan.image_w), dtype=np.uint8)

    for i, (rect, pm) in enumerate(zip(plan.rects, tiles)):
        if pm.width != rect.w or pm.height != rect.h:
            raise ShapeMismatchError(f"tile {i} is {pm.width}x{pm.height}, rect is {rect.w}x{rect.h}")
        conf = pm.values.max(axis=2)
        cls = pm.values.argmax(axis=2).astype(np.uint8)

        region_conf = best_conf[rect.y0:rect.y1, rect.x0:rect.x1]
        region_labels = labels[rect.y0:rect.y1, rect.x0:rect.x1]
        wins = conf > region_conf
        region_conf[wins] = conf[wins]
        region_labels[wins] = cls[wins]

    if best_conf.min() < 0.0:
        raise ShapeMismatchError("tile plan leaves pixels uncovered")
    return ClassMap(labels=labels, confidence=best_conf)
