from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional

# Import services
from app.core.config import build_config
from app.core.errors import KiwicalError
from app.core.evaluation import EvalConfig, Metrics, MatchReport, OcclusionBreakdown, match, metrics, occlusion_breakdown
from app.core.image import load_image, save_image
from app.core.lighting import classify_lighting, format_lighting_line, saturation_stats
from app.core.pipeline import StageTimings, backend_from_config, detect_file
from app.core.preprocess import preprocess_for
from app.core.types import Detection, GroundTruthBox, LightingClass

# Create router
router = APIRouter()


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, FileNotFoundError):
        return HTTPException(status_code=404, detail=str(e))
    if isinstance(e, KiwicalError):
        return HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}")
    return HTTPException(status_code=500, detail=str(e))


# Define request and response models
class ClassifyRequest(BaseModel):
    image: str
    sat_threshold: int = 255
    saturation_mode: str = "intersection"


class ClassifyResponse(BaseModel):
    lighting: LightingClass
    ratios: Dict[str, float]
    line: str


class PreprocessRequest(BaseModel):
    image: str
    out: str
    force_class: Optional[LightingClass] = None


class PreprocessResponse(BaseModel):
    lighting: LightingClass
    applied: LightingClass
    steps: List[str]
    out: str


class DetectRequest(BaseModel):
    image: str
    config: Dict[str, Any] = Field(default_factory=dict)
    dump_tiles: bool = False


class DetectResponse(BaseModel):
    image: str
    lighting: LightingClass
    ratios: Dict[str, float]
    preprocess: List[str]
    detections: List[Detection]
    timings: StageTimings
    tiles: Optional[Dict[str, Any]] = None


class EvaluateRequest(BaseModel):
    detections: List[Detection]
    truth: List[GroundTruthBox]
    config: EvalConfig = EvalConfig()


class EvaluateResponse(BaseModel):
    report: MatchReport
    metrics: Metrics
    occlusion: Optional[OcclusionBreakdown] = None


# Classification endpoint
@router.post("/classify", response_model=ClassifyResponse)
def classify(request: ClassifyRequest):
    """
    Classify the lighting of an image from its channel saturation.
    """
    try:
        stats = saturation_stats(load_image(request.image), request.sat_threshold)
        lighting = classify_lighting(stats, request.saturation_mode)
        return ClassifyResponse(lighting=lighting, ratios=stats.ratios(), line=format_lighting_line(lighting, stats))
    except Exception as e:
        raise _http_error(e)


# Preprocessing endpoint
@router.post("/preprocess", response_model=PreprocessResponse)
def preprocess(request: PreprocessRequest):
    """
    Apply the lighting-specific correction to an image and write the result.
    """
    try:
        img = load_image(request.image)
        lighting = classify_lighting(saturation_stats(img))
        applied = request.force_class or lighting
        plan = preprocess_for(img, applied)
        save_image(plan.apply_image(img), request.out)
        return PreprocessResponse(lighting=lighting, applied=applied, steps=[s.value for s in plan.steps], out=request.out)
    except Exception as e:
        raise _http_error(e)


# Detection endpoint
@router.post("/detect", response_model=DetectResponse)
def detect(request: DetectRequest):
    """
    Run the full detection pipeline on one image.

    `config` overrides any subset of the default pipeline settings.
    """
    try:
        cfg = build_config(request.config)
        result = detect_file(request.image, backend_from_config(cfg), cfg)
        return DetectResponse(
            image=request.image,
            lighting=result.lighting,
            ratios=result.stats.ratios(),
            preprocess=[s.value for s in result.preprocess.steps],
            detections=result.detections,
            timings=result.timings,
            tiles=result.plan.as_dict() if request.dump_tiles else None,
        )
    except Exception as e:
        raise _http_error(e)


# Evaluation endpoint
@router.post("/evaluate", response_model=EvaluateResponse)
def evaluate(request: EvaluateRequest):
    """
    Match detections to ground-truth boxes and score them.
    """
    try:
        report = match(request.detections, request.truth, request.config)
        occlusion = None
        if request.truth and all(gt.occluded is not None for gt in request.truth):
            occlusion = occlusion_breakdown(report, request.truth)
        return EvaluateResponse(report=report, metrics=metrics(report), occlusion=occlusion)
    except Exception as e:
        raise _http_error(e)
