import os

import cv2
import numpy as np
import pytest

from app.core.image import RgbImage, save_image


@pytest.fixture
def gray_image():
    return RgbImage.filled(100, 100, (128, 128, 128))


@pytest.fixture
def image_file(tmp_path):
    """A small PNG with one calyx-coloured disk on a sky-like background."""
    pixels = np.full((120, 160, 3), (60, 245, 228), dtype=np.uint8)
    cv2.circle(pixels, (80, 60), 12, (120, 0, 0), thickness=-1)
    path = os.path.join(tmp_path, "frame.png")
    save_image(RgbImage(pixels), path)
    return path
