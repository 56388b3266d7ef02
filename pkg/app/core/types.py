"""
Shared data model for the calyx detection pipeline.

Raster-like values (probability maps, class maps) are frozen dataclasses over
read-only numpy arrays. Document-like values (detections, ground truth,
manifests) are pydantic models so they validate on construction and serialize
straight to the JSON files described in the README.
"""

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

NUM_CLASSES = 4
PROB_SUM_TOLERANCE = 1e-6


class ClassId(IntEnum):
    BACKGROUND = 0
    CALYX = 1
    BRANCH = 2
    WIRE = 3


class LightingClass(str, Enum):
    TYPICAL = "typical"
    OVEREXPOSED = "overexposed"
    GLARE = "glare"


class OccluderKind(str, Enum):
    NONE = "none"
    LEAF = "leaf"
    BRANCH = "branch"
    WIRE = "wire"
    FRUIT = "fruit"
    POST = "post"
    BEAM = "beam"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.flags.writeable:
        array = array.copy()
        array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, shape (height, width, NUM_CLASSES)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or values.shape[2] != NUM_CLASSES:
            raise ValueError(f"ProbMap needs shape (h, w, {NUM_CLASSES}), got {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("ProbMap must have at least one pixel")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("ProbMap values must lie in [0, 1]")
        sums = values.sum(axis=2, dtype=np.float64)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOLERANCE:
            raise ValueError("ProbMap rows must sum to 1")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ClassMap:
    """Per-pixel winning class and the probability it won with."""

    labels: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        confidence = np.asarray(self.confidence, dtype=np.float32)
        if labels.ndim != 2 or labels.shape != confidence.shape:
            raise ValueError("labels and confidence must be 2-D and the same shape")
        if labels.size == 0:
            raise ValueError("ClassMap must have at least one pixel")
        if labels.max() >= NUM_CLASSES:
            raise ValueError("label outside the class range")
        if confidence.min() < 0.0 or confidence.max() > 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "confidence", _frozen(confidence))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


class Detection(BaseModel):
    """A calyx hypothesis in image pixel coordinates."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    center_x: float = Field(alias="cx", ge=0.0)
    center_y: float = Field(alias="cy", ge=0.0)
    radius: float = Field(gt=0.0)
    confidence: float = Field(ge=0.0, le=1.0)


class GroundTruthBox(BaseModel):
    """
    An annotated calyx.

    `occluded` is None when the annotation carries no occlusion data; the
    occluder is then unknown as well.
    """

    model_config = ConfigDict(frozen=True)

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    occluded: Optional[bool] = None
    occluder: Optional[OccluderKind] = None

    @model_validator(mode="before")
    @classmethod
    def _default_occluder(cls, data):
        if isinstance(data, dict) and data.get("occluded") is False and data.get("occluder") is None:
            data = {**data, "occluder": OccluderKind.NONE}
        return data

    @model_validator(mode="after")
    def _check_box(self):
        if not self.x_min < self.x_max or not self.y_min < self.y_max:
            raise ValueError("box must have x_min < x_max and y_min < y_max")
        if self.occluded is None:
            if self.occluder is not None:
                raise ValueError("occluder given without occlusion flag")
        elif self.occluded:
            if self.occluder in (None, OccluderKind.NONE):
                raise ValueError("occluded box needs an occluder kind")
        elif self.occluder != OccluderKind.NONE:
            raise ValueError("non-occluded box cannot name an occluder")
        return self

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    image_path: str = Field(alias="image", min_length=1)
    annotation_path: Optional[str] = Field(default=None, alias="annotation")
    lighting_label: Optional[LightingClass] = Field(default=None, alias="lighting")


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    entries: List[ManifestEntry]

    @field_validator("entries")
    @classmethod
    def _check_entries(cls, entries: List[ManifestEntry]) -> List[ManifestEntry]:
        if not entries:
            raise ValueError("manifest has no entries")
        images = [e.image_path for e in entries]
        if len(set(images)) != len(images):
            raise ValueError("manifest image paths must be unique")
        annotations = [e.annotation_path for e in entries if e.annotation_path]
        if len(set(annotations)) != len(annotations):
            raise ValueError("manifest annotation paths must be unique")
        return entries
