import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.errors import OutOfBoundsError
from app.core.types import ClassId, ClassMap, Detection

logger = logging.getLogger(__name__)


class BlobConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    min_area: int = Field(default=150, ge=1)
    min_circularity: float = Field(default=0.5, gt=0.0, le=1.0)
    connectivity: Literal[4, 8] = 8


@dataclass(frozen=True, eq=False)
class Blob:
    """
    A connected set of pixels of one class.

    `mask` is the component's footprint inside its bounding box `bbox`
    (x, y, w, h); perimeter is the outer boundary length, holes excluded.
    """

    pixel_count: int
    perimeter: float
    centroid: Tuple[float, float]
    bbox: Tuple[int, int, int, int]
    mask: np.ndarray
    mean_confidence: float

    @property
    def equivalent_radius(self) -> float:
        return math.sqrt(self.pixel_count / math.pi)

    @property
    def circularity(self) -> float:
        return 4.0 * math.pi * self.pixel_count / (self.perimeter ** 2)


def _outer_perimeter(mask: np.ndarray, area: int) -> float:
    padded = np.pad(mask.astype(np.uint8), 1)
    contours, _ = cv2.findContours(padded, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    length = max((cv2.arcLength(c, True) for c in contours), default=0.0)
    # Contours of tiny blobs collapse to points or segments; no shape of this
    # area can have a shorter boundary than a circle.
    return max(length, 2.0 * math.sqrt(math.pi * area))


def connected_components(
    cm: ClassMap,
    cls: ClassId = ClassId.CALYX,
    connectivity: int = 8,
    min_pixels: int = 1,
) -> List[Blob]:
    """
    Label the connected regions of one class.

    Args:
        cm: The class map to search
        cls: Class whose pixels form the regions
        connectivity: 4 or 8
        min_pixels: Regions smaller than this are skipped before measuring

    Returns:
        Blobs in raster order of their first pixel
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")

    mask = (cm.labels == int(cls)).astype(np.uint8)
    n, labels, stats, centroids = cv2.connectedComponentsWithStats(mask, connectivity=connectivity)
    if n <= 1:
        return []

    conf_sums = np.bincount(labels.ravel(), weights=cm.confidence.ravel().astype(np.float64), minlength=n)

    blobs = []
    for k in range(1, n):
        area = int(stats[k, cv2.CC_STAT_AREA])
        if area < min_pixels:
            continue
        x, y = int(stats[k, cv2.CC_STAT_LEFT]), int(stats[k, cv2.CC_STAT_TOP])
        w, h = int(stats[k, cv2.CC_STAT_WIDTH]), int(stats[k, cv2.CC_STAT_HEIGHT])
        footprint = labels[y:y + h, x:x + w] == k
        footprint.setflags(write=False)
        blobs.append(Blob(
            pixel_count=area,
            perimeter=_outer_perimeter(footprint, area),
            centroid=(float(centroids[k, 0]), float(centroids[k, 1])),
            bbox=(x, y, w, h),
            mask=footprint,
            mean_confidence=float(conf_sums[k] / area),
        ))

    logger.debug("%d %s components (%d measured)", n - 1, ClassId(cls).name.lower(), len(blobs))
    return blobs


def filter_blobs(blobs: Sequence[Blob], cfg: BlobConfig) -> List[Blob]:
    return [b for b in blobs if b.pixel_count >= cfg.min_area and b.circularity >= cfg.min_circularity]


def blobs_to_detections(blobs: Sequence[Blob], pm_confidence: ClassMap) -> List[Detection]:
    """
    Turn blobs into detections, most confident first.

    Center is the blob centroid, radius the equal-area radius, and confidence
    the mean per-pixel confidence of the map over the blob's pixels. Every blob
    must lie inside the map, which keeps each detection centre inside the image.

    Raises:
        OutOfBoundsError: A blob's bounding box extends past the map
    """
    dets = []
    for blob in blobs:
        x, y, w, h = blob.bbox
        if x < 0 or y < 0 or x + w > pm_confidence.width or y + h > pm_confidence.height:
            raise OutOfBoundsError(
                f"blob box {blob.bbox} lies outside the {pm_confidence.width}x{pm_confidence.height} map"
            )
        confidence = float(pm_confidence.confidence[y:y + h, x:x + w][blob.mask].mean())
        dets.append(Detection(
            center_x=blob.centroid[0],
            center_y=blob.centroid[1],
            radius=blob.equivalent_radius,
            confidence=min(1.0, max(0.0, confidence)),
        ))
    dets.sort(key=lambda d: -d.confidence)
    return dets


def extract_detections(cm: ClassMap, cfg: BlobConfig) -> List[Detection]:
    """Calyx components, filtered by area and circularity, as detections."""
    blobs = connected_components(cm, ClassId.CALYX, cfg.connectivity, min_pixels=cfg.min_area)
    return blobs_to_detections(filter_blobs(blobs, cfg), cm)
