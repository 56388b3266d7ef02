import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from app.core.errors import CorruptDataError, ImageNotFoundError, IoError, UnsupportedFormatError

logger = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PPM_MAGICS = (b"P3", b"P6")
SAVE_FORMATS = {".png": "PNG", ".ppm": "PPM"}

# Pillow modes that carry more than 8 bits per sample
_WIDE_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


@dataclass(frozen=True, eq=False)
class RgbImage:
    """
    An 8-bit, 3-channel raster stored row-major as a (height, width, 3) array.

    The array is read-only; transforms always return a new image.
    """

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.dtype != np.uint8:
            raise ValueError(f"RgbImage needs uint8 pixels, got {pixels.dtype}")
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"RgbImage needs shape (h, w, 3), got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("RgbImage must be at least 1x1")
        pixels = np.ascontiguousarray(pixels)
        if pixels.flags.writeable:
            pixels = pixels.copy()
            pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> int:
        return self.width * self.height

    def __eq__(self, other) -> bool:
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def filled(cls, width: int, height: int, rgb=(0, 0, 0)) -> "RgbImage":
        pixels = np.empty((height, width, 3), dtype=np.uint8)
        pixels[:] = rgb
        return cls(pixels)


def _sniff_format(path: str) -> str:
    with open(path, "rb") as f:
        head = f.read(33)
    if head.startswith(PNG_SIGNATURE):
        # IHDR bit depth lives at byte 24
        if len(head) >= 25 and head[24] > 8:
            raise UnsupportedFormatError(f"{path}: {head[24]}-bit PNG is not supported")
        return "PNG"
    if head[:2] in PPM_MAGICS:
        return "PPM"
    raise UnsupportedFormatError(f"{path}: not a PNG or PPM file")


def load_image(path: str) -> RgbImage:
    """
    Decode a PNG or PPM file into an RgbImage.

    Args:
        path: Path to the raster file

    Returns:
        The decoded image; any alpha channel is discarded

    Raises:
        ImageNotFoundError: The path does not exist
        UnsupportedFormatError: Not PNG/PPM, or more than 8 bits per channel
        CorruptDataError: The file is truncated or otherwise undecodable
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageNotFoundError(f"Image not found: {path}")

    expected = _sniff_format(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.format != expected:
                raise CorruptDataError(f"{path}: header says {expected}, decoder saw {im.format}")
            if im.mode in _WIDE_MODES:
                raise UnsupportedFormatError(f"{path}: mode {im.mode} has more than 8 bits per channel")
            rgb = im.convert("RGB")
            pixels = np.array(rgb, dtype=np.uint8)
    except (UnsupportedFormatError, CorruptDataError):
        raise
    except (OSError, SyntaxError, ValueError, EOFError) as e:
        raise CorruptDataError(f"{path}: {e}") from e

    logger.debug("Loaded %s (%dx%d)", path, pixels.shape[1], pixels.shape[0])
    return RgbImage(pixels)


def save_image(img: RgbImage, path: str) -> None:
    """Write an image as PNG or PPM, chosen by the file extension."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    fmt = SAVE_FORMATS.get(ext)
    if fmt is None:
        raise UnsupportedFormatError(f"Cannot write {ext or 'extensionless'} images: {path}")
    try:
        Image.fromarray(np.asarray(img.pixels), mode="RGB").save(path, format=fmt)
    except OSError as e:
        raise IoError(f"Could not write {path}: {e}") from e
