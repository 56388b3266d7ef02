"""
Lighting-specific image correction.

Overexposed images get one histogram equalization of the luma plane over the
whole image. Glare images have their blue and green channels exchanged, then
luma is equalized separately inside each block, because the glare intensity
changes quickly across the frame.

Colour conversion is full-range BT.601 with round-half-up. The coefficients
have at most six decimals, so conversion runs in exact integer arithmetic on
scaled coefficients: each channel's contribution comes from a 256-entry table
and rows are processed in chunks that stay in cache.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Tuple

import cv2
import numpy as np

from app.core.errors import InvalidParamError
from app.core.image import RgbImage
from app.core.types import LightingClass

logger = logging.getLogger(__name__)

GLARE_HE_TILE_MODES = ("disjoint", "overlap")
DEFAULT_BLOCK = (500, 500)

_CHUNK_PIXELS = 1 << 16
_LEVELS = np.arange(256, dtype=np.int32)
_CHROMA = _LEVELS - 128

# Forward tables per (R, G, B); luma is scaled by 1e3, chroma by 1e6, rounding offset folded into R
_Y_TABLES = (299 * _LEVELS + 500, 587 * _LEVELS, 114 * _LEVELS)
_CB_TABLES = (128_500_000 - 168_736 * _LEVELS, -331_264 * _LEVELS, 500_000 * _LEVELS)
_CR_TABLES = (128_500_000 + 500_000 * _LEVELS, -418_688 * _LEVELS, -81_312 * _LEVELS)

# Inverse offsets added to Y: R by Cr, B by Cb, G by Cb * 256 + Cr
_R_OFFSET = (1_402_000 * _CHROMA + 500_000) // 1_000_000
_B_OFFSET = (1_772_000 * _CHROMA + 500_000) // 1_000_000
_G_OFFSET = ((-344_136 * _CHROMA[:, None] - 714_136 * _CHROMA[None, :] + 500_000) // 1_000_000).ravel()


def _row_chunks(height: int, width: int) -> Iterator[slice]:
    step = max(1, _CHUNK_PIXELS // max(1, width))
    for y0 in range(0, height, step):
        yield slice(y0, min(height, y0 + step))


def _weighted_sum(planes, tables, scale: int) -> np.ndarray:
    acc = cv2.LUT(planes[0], tables[0])
    acc += cv2.LUT(planes[1], tables[1])
    acc += cv2.LUT(planes[2], tables[2])
    acc //= scale
    # Chroma peaks at 255.5, which rounds to 256
    np.minimum(acc, 255, out=acc)
    return acc.astype(np.uint8)


@dataclass(frozen=True)
class EqualizationLut:
    mapping: np.ndarray

    def __post_init__(self):
        mapping = np.asarray(self.mapping)
        if mapping.shape != (256,):
            raise ValueError("lookup table needs 256 entries")
        if mapping.min() < 0 or mapping.max() > 255:
            raise ValueError("lookup table entries must be 8-bit")
        if np.any(np.diff(mapping.astype(np.int32)) < 0):
            raise ValueError("lookup table must be non-decreasing")
        mapping = mapping.astype(np.uint8)
        mapping.setflags(write=False)
        object.__setattr__(self, "mapping", mapping)

    def apply(self, plane: np.ndarray) -> np.ndarray:
        plane = np.ascontiguousarray(plane, dtype=np.uint8)
        return cv2.LUT(plane, self.mapping).reshape(plane.shape)


@dataclass(frozen=True)
class YCbCrImage:
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.y)
        if len(shape) != 2 or np.shape(self.cb) != shape or np.shape(self.cr) != shape:
            raise ValueError("Y, Cb and Cr planes must be 2-D and the same size")
        for name in ("y", "cb", "cr"):
            plane = np.ascontiguousarray(getattr(self, name), dtype=np.uint8)
            object.__setattr__(self, name, plane)

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def height(self) -> int:
        return self.y.shape[0]


def rgb_to_ycbcr(img: RgbImage) -> YCbCrImage:
    h, w = img.height, img.width
    y = np.empty((h, w), dtype=np.uint8)
    cb = np.empty((h, w), dtype=np.uint8)
    cr = np.empty((h, w), dtype=np.uint8)
    for rows in _row_chunks(h, w):
        block = img.pixels[rows]
        planes = [np.ascontiguousarray(block[..., c]) for c in range(3)]
        y[rows] = _weighted_sum(planes, _Y_TABLES, 1_000)
        cb[rows] = _weighted_sum(planes, _CB_TABLES, 1_000_000)
        cr[rows] = _weighted_sum(planes, _CR_TABLES, 1_000_000)
    return YCbCrImage(y, cb, cr)


def ycbcr_to_rgb(img: YCbCrImage) -> RgbImage:
    out = np.empty((img.height, img.width, 3), dtype=np.uint8)
    for rows in _row_chunks(img.height, img.width):
        y = img.y[rows].astype(np.int32)
        cb, cr = img.cb[rows], img.cr[rows]
        channels = (
            y + cv2.LUT(cr, _R_OFFSET),
            y + _G_OFFSET[(cb.astype(np.int32) << 8) | cr],
            y + cv2.LUT(cb, _B_OFFSET),
        )
        for c, plane in enumerate(channels):
            np.clip(plane, 0, 255, out=plane)
            out[rows, :, c] = plane
    return RgbImage(out)


def equalize_histogram(plane: np.ndarray) -> Tuple[np.ndarray, EqualizationLut]:
    """
    Equalize an 8-bit plane through its cumulative histogram.

    lut[v] = round(255 * (cdf(v) - cdf_min) / (N - cdf_min)), where cdf_min is
    the cumulative count at the lowest occupied level. A constant plane has
    nothing to stretch and maps to itself.

    Args:
        plane: Non-empty uint8 array of any shape

    Returns:
        The equalized plane and the lookup table that produced it
    """
    plane = np.asarray(plane, dtype=np.uint8)
    if plane.size == 0:
        raise InvalidParamError("cannot equalize an empty plane")

    hist = np.bincount(plane.ravel(), minlength=256)
    cdf = np.cumsum(hist, dtype=np.int64)
    n = plane.size
    cdf_min = cdf[np.flatnonzero(hist)[0]]

    if cdf_min == n:
        lut = EqualizationLut(np.arange(256))
    else:
        span = n - cdf_min
        scaled = (510 * (cdf - cdf_min) + span) // (2 * span)
        lut = EqualizationLut(np.clip(scaled, 0, 255))
    return lut.apply(plane), lut


def equalize_luma(img: RgbImage) -> RgbImage:
    """Equalize the Y plane of an image, leaving Cb and Cr as they are."""
    ycc = rgb_to_ycbcr(img)
    y_eq, _ = equalize_histogram(ycc.y)
    return ycbcr_to_rgb(YCbCrImage(y_eq, ycc.cb, ycc.cr))


def preprocess_overexposed(img: RgbImage) -> RgbImage:
    return equalize_luma(img)


def swap_blue_green(img: RgbImage) -> RgbImage:
    return RgbImage(img.pixels[..., [0, 2, 1]])


def preprocess_glare_tile(tile: RgbImage) -> RgbImage:
    """Equalize luma inside one tile; the channel swap is applied beforehand on the whole image."""
    return equalize_luma(tile)


def equalize_blocks(img: RgbImage, block: Tuple[int, int] = DEFAULT_BLOCK) -> RgbImage:
    """Equalize luma independently in each disjoint block; edge blocks may be smaller."""
    block_w, block_h = block
    if block_w < 1 or block_h < 1:
        raise InvalidParamError(f"block dimensions must be positive, got {block}")
    out = np.array(img.pixels)
    for y0 in range(0, img.height, block_h):
        for x0 in range(0, img.width, block_w):
            region = RgbImage(img.pixels[y0:y0 + block_h, x0:x0 + block_w])
            out[y0:y0 + block_h, x0:x0 + block_w] = preprocess_glare_tile(region).pixels
    return RgbImage(out)


class PreprocessStep(str, Enum):
    GLOBAL_HE = "global-he"
    SWAP_BLUE_GREEN = "swap"
    TILE_HE = "per-tile-he"


@dataclass(frozen=True)
class PreprocessPlan:
    """
    The transforms chosen for one image.

    apply_image runs the whole-image part before tiling; apply_tile runs on
    each inference tile after cropping.
    """

    lighting: LightingClass
    steps: Tuple[PreprocessStep, ...] = field(default_factory=tuple)
    glare_he_tiles: str = "disjoint"
    block: Tuple[int, int] = DEFAULT_BLOCK

    @property
    def is_noop(self) -> bool:
        return not self.steps

    @property
    def per_tile(self) -> bool:
        return PreprocessStep.TILE_HE in self.steps and self.glare_he_tiles == "overlap"

    def apply_image(self, img: RgbImage) -> RgbImage:
        for step in self.steps:
            if step == PreprocessStep.GLOBAL_HE:
                img = preprocess_overexposed(img)
            elif step == PreprocessStep.SWAP_BLUE_GREEN:
                img = swap_blue_green(img)
            elif step == PreprocessStep.TILE_HE and self.glare_he_tiles == "disjoint":
                img = equalize_blocks(img, self.block)
        return img

    def apply_tile(self, tile: RgbImage) -> RgbImage:
        if self.per_tile:
            return preprocess_glare_tile(tile)
        return tile


def preprocess_for(
    img: RgbImage,
    cls: LightingClass,
    glare_he_tiles: str = "disjoint",
    block: Tuple[int, int] = DEFAULT_BLOCK,
) -> PreprocessPlan:
    """
    Choose the preprocessing for an image of the given lighting class.

    Typical images are left alone. Overexposed images get global luma
    equalization. Glare images get the blue/green swap followed by per-block
    equalization, over disjoint blocks or over the inference tiles.
    """
    if glare_he_tiles not in GLARE_HE_TILE_MODES:
        raise InvalidParamError(f"glare_he_tiles must be one of {GLARE_HE_TILE_MODES}, got {glare_he_tiles!r}")

    if cls == LightingClass.OVEREXPOSED:
        steps = (PreprocessStep.GLOBAL_HE,)
    elif cls == LightingClass.GLARE:
        steps = (PreprocessStep.SWAP_BLUE_GREEN, PreprocessStep.TILE_HE)
    else:
        steps = ()

    logger.debug("Preprocess plan for %dx%d %s image: %s", img.width, img.height, cls.value,
                 [s.value for s in steps])
    return PreprocessPlan(lighting=cls, steps=steps, glare_he_tiles=glare_he_tiles, block=tuple(block))
