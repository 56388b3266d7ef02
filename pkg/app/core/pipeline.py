"""
End-to-end calyx detection for one image.

Stages run in a fixed order: classify lighting, preprocess, tile, segment,
merge, extract blobs. Each stage is timed with a monotonic clock.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from app.core.blobs import extract_detections
from app.core.config import PipelineConfig
from app.core.errors import KiwicalError
from app.core.evaluation import Metrics
from app.core.image import RgbImage, load_image
from app.core.lighting import SaturationStats, classify_lighting, saturation_stats
from app.core.preprocess import PreprocessPlan, preprocess_for
from app.core.segmentation import SegmentationBackend, SegmenterContract, make_backend, segment
from app.core.tiling import TilePlan, extract_tile, merge_maps, plan_tiles
from app.core.types import ClassMap, Detection, LightingClass

logger = logging.getLogger(__name__)

STAGES = ("classify", "preprocess", "tile", "segment", "merge", "blobs")
REPORT_SCHEMA_VERSION = 1


class StageTimings(BaseModel):
    """Wall-clock milliseconds per stage."""

    model_config = ConfigDict(frozen=True)

    classify_ms: float = 0.0
    preprocess_ms: float = 0.0
    tile_ms: float = 0.0
    segment_ms: float = 0.0
    merge_ms: float = 0.0
    blobs_ms: float = 0.0
    total_ms: float = 0.0


@dataclass(frozen=True)
class DetectionResult:
    detections: List[Detection]
    lighting: LightingClass
    stats: SaturationStats
    preprocess: PreprocessPlan
    plan: TilePlan
    class_map: ClassMap
    timings: StageTimings


class _Stopwatch:
    def __init__(self):
        self.elapsed: Dict[str, float] = {stage: 0.0 for stage in STAGES}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.elapsed[name] += (time.perf_counter() - start) * 1000.0

    def timings(self) -> StageTimings:
        fields = {f"{name}_ms": ms for name, ms in self.elapsed.items()}
        return StageTimings(**fields, total_ms=sum(self.elapsed.values()))


def backend_from_config(cfg: PipelineConfig) -> SegmentationBackend:
    contract = SegmenterContract(max_tile_w=cfg.max_tile_width, max_tile_h=cfg.max_tile_height)
    return make_backend(cfg.backend, contract)


def plan_preprocess(img: RgbImage, lighting: LightingClass, cfg: PipelineConfig) -> PreprocessPlan:
    """Choose preprocessing, honouring the enable switch and a forced class."""
    if not cfg.preprocess.enabled:
        return preprocess_for(img, LightingClass.TYPICAL, cfg.preprocess.glare_he_tiles)
    applied = cfg.preprocess.force_class or lighting
    return preprocess_for(
        img,
        applied,
        cfg.preprocess.glare_he_tiles,
        block=(cfg.tile.width, cfg.tile.height),
    )


def run_detection(
    img: RgbImage,
    backend: SegmentationBackend,
    cfg: Optional[PipelineConfig] = None,
    workers: int = 1,
) -> DetectionResult:
    """
    Detect calyces in one image.

    Args:
        img: The image to process
        backend: Segmentation backend, already bound to this image
        cfg: Pipeline settings
        workers: Threads used to segment tiles; results keep tile order

    Returns:
        Detections with the lighting class, plans, merged map and timings

    Raises:
        TileTooLargeError: The tile size exceeds the backend contract
        BackendFailureError: The backend failed on a tile
    """
    cfg = cfg or PipelineConfig()
    watch = _Stopwatch()

    with watch.stage("classify"):
        stats = saturation_stats(img, cfg.sat_threshold)
        lighting = classify_lighting(stats, cfg.saturation_mode)

    with watch.stage("preprocess"):
        plan_pre = plan_preprocess(img, lighting, cfg)
        prepared = plan_pre.apply_image(img)

    with watch.stage("tile"):
        plan = plan_tiles(img.width, img.height, (cfg.tile.width, cfg.tile.height), cfg.tile.overlap)
        tiles = [extract_tile(prepared, rect) for rect in plan.rects]

    if plan_pre.per_tile:
        with watch.stage("preprocess"):
            tiles = [plan_pre.apply_tile(t) for t in tiles]

    with watch.stage("segment"):
        if workers > 1 and len(tiles) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                maps = list(pool.map(lambda item: segment(backend, item[1], item[0]), enumerate(tiles)))
        else:
            maps = [segment(backend, tile, i) for i, tile in enumerate(tiles)]

    with watch.stage("merge"):
        class_map = merge_maps(plan, maps)

    with watch.stage("blobs"):
        detections = extract_detections(class_map, cfg.blobs)

    timings = watch.timings()
    logger.debug(
        "%dx%d %s image: %d tiles, %d detections in %.1f ms",
        img.width, img.height, lighting.value, len(plan), len(detections), timings.total_ms,
    )
    return DetectionResult(
        detections=detections,
        lighting=lighting,
        stats=stats,
        preprocess=plan_pre,
        plan=plan,
        class_map=class_map,
        timings=timings,
    )


def detect_file(
    path: str,
    backend: SegmentationBackend,
    cfg: Optional[PipelineConfig] = None,
    workers: int = 1,
) -> DetectionResult:
    img = load_image(path)
    return run_detection(img, backend.for_image(path), cfg, workers)


def time_pipeline(img: RgbImage, backend: SegmentationBackend, cfg: Optional[PipelineConfig] = None) -> StageTimings:
    return run_detection(img, backend, cfg).timings


@dataclass(frozen=True)
class BatchItem:
    """Outcome of one image in a batch; the merged class map is not kept."""

    path: str
    detections: List[Detection] = field(default_factory=list)
    lighting: Optional[LightingClass] = None
    stats: Optional[SaturationStats] = None
    preprocess: Optional[PreprocessPlan] = None
    plan: Optional[TilePlan] = None
    timings: Optional[StageTimings] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def detect_batch(
    paths: Sequence[str],
    backend: SegmentationBackend,
    cfg: Optional[PipelineConfig] = None,
    workers: int = 1,
) -> List[BatchItem]:
    """
    Detect calyces in many images, collecting per-image failures.

    Images run on a bounded thread pool; a lone image uses the pool for its
    tiles instead. Items come back in input order.
    """
    cfg = cfg or PipelineConfig()
    tile_workers = workers if len(paths) == 1 else 1

    def one(path: str) -> BatchItem:
        try:
            result = detect_file(path, backend, cfg, tile_workers)
        except (KiwicalError, OSError) as e:
            logger.warning("Failed on %s: %s", path, e)
            return BatchItem(path=path, error=f"{type(e).__name__}: {e}")
        return BatchItem(
            path=path,
            detections=result.detections,
            lighting=result.lighting,
            stats=result.stats,
            preprocess=result.preprocess,
            plan=result.plan,
            timings=result.timings,
        )

    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, paths))
    return [one(path) for path in paths]


class ImageRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    image: str
    lighting: Optional[LightingClass] = None
    ratios: Dict[str, float] = Field(default_factory=dict)
    preprocess: List[str] = Field(default_factory=list)
    detections: List[Detection] = Field(default_factory=list)
    detections_file: Optional[str] = None
    timings: Optional[StageTimings] = None
    tiles: Optional[Dict[str, Any]] = None
    error: Optional[str] = None

    @classmethod
    def from_item(cls, item: BatchItem, detections_file: Optional[str] = None, dump_tiles: bool = False) -> "ImageRecord":
        return cls(
            image=item.path,
            lighting=item.lighting,
            ratios=item.stats.ratios() if item.stats else {},
            preprocess=[s.value for s in item.preprocess.steps] if item.preprocess else [],
            detections=item.detections,
            detections_file=detections_file,
            timings=item.timings,
            tiles=item.plan.as_dict() if dump_tiles and item.plan else None,
            error=item.error,
        )


class RunReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    schema_version: int = REPORT_SCHEMA_VERSION
    command: str
    config: Dict[str, Any]
    images: List[ImageRecord]
    metrics: Optional[Metrics] = None
    failed: int = 0
