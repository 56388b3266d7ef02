import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from app.core.errors import InvalidParamError
from app.core.image import RgbImage
from app.core.types import LightingClass

logger = logging.getLogger(__name__)

DEFAULT_SAT_THRESHOLD = 255
OVEREXPOSED_RATIO = 0.25
GLARE_BLUE_RATIO = 0.5

SATURATION_MODES = ("intersection", "per-channel")


@dataclass(frozen=True)
class SaturationStats:
    r_sat: int
    g_sat: int
    b_sat: int
    tri_sat: int
    total: int

    def __post_init__(self):
        if self.total < 1:
            raise ValueError("total must be positive")
        if min(self.r_sat, self.g_sat, self.b_sat, self.tri_sat) < 0:
            raise ValueError("saturation counts cannot be negative")
        if not self.tri_sat <= min(self.r_sat, self.g_sat, self.b_sat) <= self.total:
            raise ValueError("tri_sat <= min(r_sat, g_sat, b_sat) <= total must hold")

    def ratios(self) -> Dict[str, float]:
        return {
            "tri": self.tri_sat / self.total,
            "blue": self.b_sat / self.total,
            "green": self.g_sat / self.total,
            "red": self.r_sat / self.total,
        }


def saturation_stats(img: RgbImage, sat_threshold: int = DEFAULT_SAT_THRESHOLD) -> SaturationStats:
    """
    Count saturated pixels per channel and pixels saturated in all three.

    A channel is saturated when its value is at or above sat_threshold.
    """
    if not 1 <= sat_threshold <= 255:
        raise InvalidParamError(f"sat_threshold must be in [1, 255], got {sat_threshold}")
    saturated = img.pixels >= sat_threshold
    per_channel = saturated.reshape(-1, 3).sum(axis=0)
    tri = int(np.count_nonzero(saturated.all(axis=2)))
    return SaturationStats(
        r_sat=int(per_channel[0]),
        g_sat=int(per_channel[1]),
        b_sat=int(per_channel[2]),
        tri_sat=tri,
        total=img.size,
    )


def is_overexposed(stats: SaturationStats, saturation_mode: str = "intersection") -> bool:
    if saturation_mode == "intersection":
        return stats.tri_sat / stats.total >= OVEREXPOSED_RATIO
    if saturation_mode == "per-channel":
        return all(c / stats.total >= OVEREXPOSED_RATIO for c in (stats.r_sat, stats.g_sat, stats.b_sat))
    raise InvalidParamError(f"saturation_mode must be one of {SATURATION_MODES}, got {saturation_mode!r}")


def classify_lighting(stats: SaturationStats, saturation_mode: str = "intersection") -> LightingClass:
    """
    Classify an image from its saturation counts.

    Overexposed when at least a quarter of the pixels are saturated in R, G and B
    (the per-pixel intersection by default, or each channel separately with
    saturation_mode="per-channel"). Glare when overexposed and at least half of the
    pixels have a saturated blue channel. Both thresholds are inclusive.
    """
    if not is_overexposed(stats, saturation_mode):
        return LightingClass.TYPICAL
    if stats.b_sat / stats.total >= GLARE_BLUE_RATIO:
        return LightingClass.GLARE
    return LightingClass.OVEREXPOSED


def format_lighting_line(cls: LightingClass, stats: SaturationStats) -> str:
    r = stats.ratios()
    return f"{cls.value} tri={r['tri']:.4f} blue={r['blue']:.4f} green={r['green']:.4f}"
