import logging
import os
import struct
from typing import Optional, Tuple, Union

import numpy as np

from app.core.errors import BackendFailureError, IoError
from app.core.types import NUM_CLASSES, ProbMap

logger = logging.getLogger(__name__)

PMAP_MAGIC = b"PMAP"
PMAP_HEADER = struct.Struct("<4sIII")
LOAD_SUM_TOLERANCE = 1e-4

TileId = Union[int, str]


def write_pmap(pm: ProbMap, path: str) -> None:
    """
    Write a probability map as a .pmap file.

    Layout (little-endian): magic "PMAP", u32 width, u32 height, u32 classes,
    then width*height*classes float32 values, pixel-major and class-minor.
    """
    header = PMAP_HEADER.pack(PMAP_MAGIC, pm.width, pm.height, pm.classes)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(pm.values, dtype="<f4").tobytes())
    except OSError as e:
        raise IoError(f"Could not write {path}: {e}") from e


def read_pmap(path: str, expected_shape: Optional[Tuple[int, int]] = None) -> ProbMap:
    """
    Read and validate a .pmap file.

    Args:
        path: File to read
        expected_shape: Optional (width, height) the map must have

    Returns:
        The probability map, renormalized after validation

    Raises:
        BackendFailureError: Missing file, bad header, wrong size, or rows
            that do not sum to 1 within 1e-4
    """
    if not os.path.isfile(path):
        raise BackendFailureError(f"Probability map not found: {path}")
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < PMAP_HEADER.size:
        raise BackendFailureError(f"{path}: file too short for a .pmap header")
    magic, width, height, classes = PMAP_HEADER.unpack_from(data)
    if magic != PMAP_MAGIC:
        raise BackendFailureError(f"{path}: bad magic {magic!r}")
    if classes != NUM_CLASSES:
        raise BackendFailureError(f"{path}: expected {NUM_CLASSES} classes, found {classes}")
    if expected_shape is not None and (width, height) != tuple(expected_shape):
        raise BackendFailureError(
            f"{path}: map is {width}x{height}, tile is {expected_shape[0]}x{expected_shape[1]}"
        )

    count = width * height * classes
    payload = data[PMAP_HEADER.size:]
    if len(payload) != count * 4:
        raise BackendFailureError(f"{path}: expected {count} float32 values, found {len(payload) // 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width, classes).astype(np.float64)

    if not np.all(np.isfinite(values)) or values.min() < 0.0:
        raise BackendFailureError(f"{path}: probabilities must be finite and non-negative")
    sums = values.sum(axis=2)
    if np.abs(sums - 1.0).max() > LOAD_SUM_TOLERANCE:
        raise BackendFailureError(f"{path}: probability rows are not normalized")

    values = np.clip(values / sums[..., None], 0.0, 1.0)
    return ProbMap(values.astype(np.float32))


class PmapStore:
    """
    A directory of tile probability maps named tile_<id>.pmap.
    """

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or os.getenv("KIWICAL_PMAP_DIR", "./pmaps")

    def path_for(self, tile_id: TileId) -> str:
        return os.path.join(self.directory, f"tile_{tile_id}.pmap")

    def save(self, tile_id: TileId, pm: ProbMap) -> str:
        os.makedirs(self.directory, exist_ok=True)
        path = self.path_for(tile_id)
        write_pmap(pm, path)
        return path

    def load(self, tile_id: TileId, expected_shape: Optional[Tuple[int, int]] = None) -> ProbMap:
        return read_pmap(self.path_for(tile_id), expected_shape)

    def for_image(self, image_path: str) -> "PmapStore":
        """Use <dir>/<image stem>/ when it exists, so one directory can serve a batch."""
        stem = os.path.splitext(os.path.basename(image_path))[0]
        candidate = os.path.join(self.directory, stem)
        return PmapStore(candidate) if os.path.isdir(candidate) else self
