"""
JSON documents on disk: ground-truth annotations, detections and dataset manifests.
"""

import json
import logging
import os
from typing import Any, Dict, List

from pydantic import ValidationError

from app.core.errors import AnnotationParseError, IoError, SchemaError
from app.core.types import DatasetManifest, Detection, GroundTruthBox

logger = logging.getLogger(__name__)

# Kept apart from the <stem>.json annotation files that synth writes
DETECTIONS_SUFFIX = ".det.json"


def read_json(path: str) -> Any:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise AnnotationParseError(f"{path}: {e}") from e
    except OSError as e:
        raise IoError(f"Could not read {path}: {e}") from e


def write_json(path: str, document: Dict[str, Any]) -> None:
    path = os.fspath(path)
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise IoError(f"Could not write {path}: {e}") from e


def _list_field(document: Any, key: str, path: str) -> List[Any]:
    if not isinstance(document, dict) or not isinstance(document.get(key), list):
        raise SchemaError(f"{path}: expected an object with a '{key}' array")
    return document[key]


def load_annotations(path: str) -> List[GroundTruthBox]:
    """
    Load the ground-truth boxes of one image.

    Args:
        path: Path to an annotation document ({"boxes": [...]})

    Returns:
        The validated boxes in file order
    """
    document = read_json(path)
    boxes = []
    for i, raw in enumerate(_list_field(document, "boxes", path)):
        try:
            boxes.append(GroundTruthBox.model_validate(raw))
        except ValidationError as e:
            raise SchemaError(f"{path}: box {i}: {e}") from e
    return boxes


def save_annotations(boxes: List[GroundTruthBox], path: str) -> None:
    write_json(path, {"boxes": [b.model_dump(mode="json") for b in boxes]})


def save_detections(dets: List[Detection], path: str) -> None:
    """Write detections in input order as {"detections": [{cx, cy, radius, confidence}]}."""
    write_json(path, {"detections": [d.model_dump(mode="json", by_alias=True) for d in dets]})


def detections_path(detections_dir: str, image_path: str) -> str:
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return os.path.join(detections_dir, stem + DETECTIONS_SUFFIX)


def load_detections(path: str) -> List[Detection]:
    document = read_json(path)
    dets = []
    for i, raw in enumerate(_list_field(document, "detections", path)):
        try:
            dets.append(Detection.model_validate(raw))
        except ValidationError as e:
            raise SchemaError(f"{path}: detection {i}: {e}") from e
    return dets


def load_manifest(path: str) -> DatasetManifest:
    """
    Load a dataset manifest.

    Relative image and annotation paths are resolved against the manifest's
    own directory so manifests can travel with their data.
    """
    document = read_json(path)
    base_dir = os.path.dirname(os.path.abspath(os.fspath(path)))
    _list_field(document, "entries", path)

    entries = []
    for raw in document["entries"]:
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}: manifest entries must be objects")
        entry = dict(raw)
        for key in ("image", "annotation"):
            value = entry.get(key)
            if isinstance(value, str) and value and not os.path.isabs(value):
                entry[key] = os.path.join(base_dir, value)
        entries.append(entry)

    try:
        return DatasetManifest.model_validate({"name": document.get("name"), "entries": entries})
    except ValidationError as e:
        raise SchemaError(f"{path}: {e}") from e


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    write_json(path, manifest.model_dump(mode="json", by_alias=True))
