import logging
from typing import Optional, Sequence

import cv2
import numpy as np

from app.core.evaluation import EvalConfig, match
from app.core.image import RgbImage, save_image
from app.core.types import Detection, GroundTruthBox

logger = logging.getLogger(__name__)

# RGB
DETECTION_COLOUR = (255, 0, 255)
MATCHED_COLOUR = (0, 200, 0)
FALSE_POSITIVE_COLOUR = (255, 0, 0)
FALSE_NEGATIVE_COLOUR = (255, 200, 0)
LINE_THICKNESS = 2


def _circle(canvas: np.ndarray, det: Detection, colour) -> None:
    center = (int(round(det.center_x)), int(round(det.center_y)))
    cv2.circle(canvas, center, max(1, int(round(det.radius))), colour, LINE_THICKNESS)


def _box(canvas: np.ndarray, gt: GroundTruthBox, colour) -> None:
    top_left = (int(round(gt.x_min)), int(round(gt.y_min)))
    bottom_right = (int(round(gt.x_max)), int(round(gt.y_max)))
    cv2.rectangle(canvas, top_left, bottom_right, colour, LINE_THICKNESS)


def render_overlay(
    img: RgbImage,
    dets: Sequence[Detection],
    truth: Optional[Sequence[GroundTruthBox]] = None,
    cfg: Optional[EvalConfig] = None,
) -> RgbImage:
    """
    Draw detections as circles and ground truth as boxes.

    Without truth every detection is drawn in one colour. With truth the two
    sets are matched first: matched pairs are green, false positives red and
    missed calyces yellow.
    """
    canvas = np.array(img.pixels)

    if truth is None:
        for det in dets:
            _circle(canvas, det, DETECTION_COLOUR)
        return RgbImage(canvas)

    report = match(dets, truth, cfg)
    matched_dets = report.matched_dets
    matched_gts = report.matched_gts
    for j, gt in enumerate(truth):
        _box(canvas, gt, MATCHED_COLOUR if j in matched_gts else FALSE_NEGATIVE_COLOUR)
    for i, det in enumerate(dets):
        _circle(canvas, det, MATCHED_COLOUR if i in matched_dets else FALSE_POSITIVE_COLOUR)

    logger.debug("Overlay: %d matched, %d false positives, %d missed", report.tp, report.fp, report.fn)
    return RgbImage(canvas)


def write_overlay(
    img: RgbImage,
    dets: Sequence[Detection],
    path: str,
    truth: Optional[Sequence[GroundTruthBox]] = None,
    cfg: Optional[EvalConfig] = None,
) -> RgbImage:
    out = render_overlay(img, dets, truth, cfg)
    save_image(out, path)
    return out
