"""
Pipeline and process configuration.

Process settings come from the environment (a .env file is loaded first).
Pipeline settings are a pydantic model whose defaults are the published
operating point; a JSON file can override any subset of them.
"""

import logging
import os
from typing import Any, Dict, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.core.blobs import BlobConfig
from app.core.errors import AnnotationParseError, SchemaError
from app.core.evaluation import EvalConfig
from app.core.types import LightingClass
from app.db.annotations import read_json

load_dotenv()

logger = logging.getLogger(__name__)

DATA_DIR = os.getenv("KIWICAL_DATA_DIR", "./data")
PMAP_DIR = os.getenv("KIWICAL_PMAP_DIR", "./pmaps")
LOG_LEVEL = os.getenv("KIWICAL_LOG_LEVEL", "INFO")
CONFIG_PATH = os.getenv("KIWICAL_CONFIG")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def default_workers() -> int:
    value = os.getenv("KIWICAL_WORKERS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("Ignoring KIWICAL_WORKERS=%r", value)
    return os.cpu_count() or 1


class TileConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    width: int = Field(default=500, ge=1)
    height: int = Field(default=500, ge=1)
    overlap: float = Field(default=0.20, ge=0.0, le=0.9)


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    force_class: Optional[LightingClass] = None
    glare_he_tiles: Literal["disjoint", "overlap"] = "disjoint"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    backend: str = "reference"
    tile: TileConfig = TileConfig()
    blobs: BlobConfig = BlobConfig()
    eval: EvalConfig = EvalConfig()
    sat_threshold: int = Field(default=255, ge=1, le=255)
    saturation_mode: Literal["intersection", "per-channel"] = "intersection"
    preprocess: PreprocessConfig = PreprocessConfig()
    max_tile_width: int = Field(default=500, ge=1)
    max_tile_height: int = Field(default=500, ge=1)


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(*documents: Optional[Dict[str, Any]]) -> PipelineConfig:
    """Layer override documents over the defaults, later ones winning."""
    merged = PipelineConfig().model_dump(mode="json")
    for document in documents:
        if document:
            merged = deep_merge(merged, document)
    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as e:
        raise SchemaError(f"Invalid pipeline configuration: {e}") from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Load the pipeline configuration.

    Args:
        path: JSON file overriding the defaults; KIWICAL_CONFIG when omitted
        overrides: Nested settings applied on top of the file

    Raises:
        SchemaError: Unknown keys or out-of-range values
    """
    path = path or CONFIG_PATH
    document = None
    if path:
        try:
            document = read_json(path)
        except FileNotFoundError as e:
            raise SchemaError(f"Config file not found: {path}") from e
        except AnnotationParseError as e:
            raise SchemaError(f"Config file is not valid JSON: {e}") from e
        if not isinstance(document, dict):
            raise SchemaError(f"{path}: config must be a JSON object")
        logger.debug("Loaded config overrides from %s", path)
    return build_config(document, overrides)
