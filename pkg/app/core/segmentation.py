"""
Segmentation backends.

A backend turns an RGB tile into a per-pixel probability map over the four
classes. Two backends ship: a chroma-rule segmenter that is exact on the
synthetic scenes, and a replay backend that reads probability maps produced
by an external model.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.errors import BackendFailureError, InvalidParamError, TileTooLargeError
from app.core.image import RgbImage
from app.core.types import NUM_CLASSES, ClassId, ClassMap, ProbMap
from app.db.pmap_store import PmapStore, TileId

logger = logging.getLogger(__name__)

RULE_PROBABILITY = 0.99

# Scene key colours shared with the synthetic scene generator
CALYX_KEY = (120, 0, 0)
BRANCH_KEY = (110, 245, 228)
WIRE_KEY = (170, 245, 228)


@dataclass(frozen=True)
class SegmenterContract:
    max_tile_w: int = 500
    max_tile_h: int = 500
    classes: int = NUM_CLASSES

    def admits(self, tile: RgbImage) -> bool:
        return tile.width <= self.max_tile_w and tile.height <= self.max_tile_h


@dataclass(frozen=True)
class ChromaRule:
    """
    Claims a pixel for `cls` when every channel is within `tolerance` of `center`.

    With min_blue_gap set, max(R, G) - B must also reach it.
    """

    cls: ClassId
    center: Tuple[int, int, int]
    tolerance: Tuple[int, int, int]
    min_blue_gap: int = 0

    def __post_init__(self):
        if len(self.center) != 3 or len(self.tolerance) != 3:
            raise ValueError("center and tolerance need one value per channel")
        if any(t < 0 for t in self.tolerance):
            raise ValueError("tolerance cannot be negative")
        object.__setattr__(self, "cls", ClassId(self.cls))


# Calyx is keyed on a dark blue channel well below red or green. Blue is the
# channel the glare correction restores; red and green carry the glare residue.
DEFAULT_RULES = (
    ChromaRule(ClassId.CALYX, CALYX_KEY, (255, 255, 40), min_blue_gap=60),
    ChromaRule(ClassId.BRANCH, BRANCH_KEY, (12, 12, 12)),
    ChromaRule(ClassId.WIRE, WIRE_KEY, (12, 12, 12)),
    ChromaRule(ClassId.BACKGROUND, (0, 0, 0), (255, 255, 255)),
)


def argmax_classmap(pm: ProbMap) -> ClassMap:
    """Pick the most probable class per pixel; ties go to the lowest class id."""
    return ClassMap(labels=pm.values.argmax(axis=2).astype(np.uint8), confidence=pm.values.max(axis=2))


def reference_segment(rules: Sequence[ChromaRule], tile: RgbImage) -> ProbMap:
    """
    Segment a tile with ordered chroma rules.

    The first matching rule claims the pixel with probability 0.99 and the
    remainder is spread evenly over the other classes. Pixels no rule claims
    fall to Background.
    """
    px = tile.pixels.astype(np.int16)
    claimed = np.full((tile.height, tile.width), -1, dtype=np.int8)
    for rule in rules:
        center = np.asarray(rule.center, dtype=np.int16)
        tol = np.asarray(rule.tolerance, dtype=np.int16)
        match = np.all(np.abs(px - center) <= tol, axis=2) & (claimed < 0)
        if rule.min_blue_gap:
            match &= px[..., :2].max(axis=2) - px[..., 2] >= rule.min_blue_gap
        claimed[match] = int(rule.cls)
    claimed[claimed < 0] = int(ClassId.BACKGROUND)

    rest = (1.0 - RULE_PROBABILITY) / (NUM_CLASSES - 1)
    values = np.full((tile.height, tile.width, NUM_CLASSES), rest, dtype=np.float32)
    np.put_along_axis(values, claimed.astype(np.intp)[..., None], RULE_PROBABILITY, axis=2)
    return ProbMap(values)


class SegmentationBackend(ABC):
    """Every backend must return identical maps for identical tiles and be safe to call concurrently."""

    name = "backend"

    def __init__(self, contract: Optional[SegmenterContract] = None):
        self.contract = contract or SegmenterContract()

    @abstractmethod
    def predict(self, tile: RgbImage, tile_id: Optional[TileId] = None) -> ProbMap:
        ...

    def for_image(self, image_path: str) -> "SegmentationBackend":
        return self


class ReferenceBackend(SegmentationBackend):
    name = "reference"

    def __init__(self, rules: Sequence[ChromaRule] = DEFAULT_RULES, contract: Optional[SegmenterContract] = None):
        super().__init__(contract)
        self.rules = tuple(rules)

    def predict(self, tile: RgbImage, tile_id: Optional[TileId] = None) -> ProbMap:
        return reference_segment(self.rules, tile)


class PmapFileBackend(SegmentationBackend):
    """Replays tile_<id>.pmap files written by an external model."""

    name = "pmap"

    def __init__(self, directory: str, contract: Optional[SegmenterContract] = None):
        super().__init__(contract)
        self.store = PmapStore(directory)

    def predict(self, tile: RgbImage, tile_id: Optional[TileId] = None) -> ProbMap:
        if tile_id is None:
            raise BackendFailureError("the pmap backend needs a tile id")
        return self.store.load(tile_id, expected_shape=(tile.width, tile.height))

    def for_image(self, image_path: str) -> "PmapFileBackend":
        backend = PmapFileBackend(self.store.directory, self.contract)
        backend.store = self.store.for_image(image_path)
        return backend


def segment(backend: SegmentationBackend, tile: RgbImage, tile_id: Optional[TileId] = None) -> ProbMap:
    """
    Run a backend on one tile, enforcing the tile-size contract.

    Raises:
        TileTooLargeError: The tile exceeds the backend's maximum dimensions
        BackendFailureError: The backend failed or returned a map of the wrong size
    """
    if not backend.contract.admits(tile):
        raise TileTooLargeError(
            f"{tile.width}x{tile.height} tile exceeds "
            f"{backend.contract.max_tile_w}x{backend.contract.max_tile_h}"
        )
    pm = backend.predict(tile, tile_id)
    if pm.width != tile.width or pm.height != tile.height:
        raise BackendFailureError(f"{backend.name} returned {pm.width}x{pm.height} for a {tile.width}x{tile.height} tile")
    return pm


def file_backend_segment(directory: str, tile_id: TileId, expected_shape: Optional[Tuple[int, int]] = None) -> ProbMap:
    return PmapStore(directory).load(tile_id, expected_shape)


def make_backend(spec: str, contract: Optional[SegmenterContract] = None) -> SegmentationBackend:
    """Build a backend from `reference` or `pmap:<dir>`."""
    if spec == "reference":
        return ReferenceBackend(contract=contract)
    if spec.startswith("pmap:") and len(spec) > len("pmap:"):
        return PmapFileBackend(spec[len("pmap:"):], contract=contract)
    raise InvalidParamError(f"unknown backend {spec!r}; use 'reference' or 'pmap:<dir>'")
