import cv2
import numpy as np

from app.core.synth import SceneSpec, generate_scene
from app.core.types import ClassId, ClassMap, Detection, GroundTruthBox, LightingClass

# Scenes in tests are smaller than camera frames to keep the suite quick
SCENE_W = 800
SCENE_H = 600


def make_scene(seed=0, lighting=LightingClass.TYPICAL, n_calyces=60, occluded_fraction=0.0, **kwargs):
    spec = SceneSpec(
        width=kwargs.pop("width", SCENE_W),
        height=kwargs.pop("height", SCENE_H),
        n_calyces=n_calyces,
        occluded_fraction=occluded_fraction,
        lighting=lighting,
        seed=seed,
        **kwargs,
    )
    return generate_scene(spec)


def class_map_from_labels(labels, confidence=0.99):
    labels = np.asarray(labels, dtype=np.uint8)
    return ClassMap(labels=labels, confidence=np.full(labels.shape, confidence, dtype=np.float32))


def disk_labels(width, height, center, radius, cls=ClassId.CALYX):
    labels = np.zeros((height, width), dtype=np.uint8)
    cv2.circle(labels, center, radius, int(cls), thickness=-1)
    return labels


def box_at(cx, cy, half=10.0, **kwargs):
    return GroundTruthBox(x_min=cx - half, y_min=cy - half, x_max=cx + half, y_max=cy + half, **kwargs)


def det_at(cx, cy, radius=10.0, confidence=0.9):
    return Detection(center_x=cx, center_y=cy, radius=radius, confidence=confidence)
