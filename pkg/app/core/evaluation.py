"""
Calyx-level evaluation.

Detections are paired one-to-one with ground-truth boxes by a Hungarian
assignment over centre distances. Pairs farther apart than the gating
threshold are not true positives; unpaired detections are false positives and
unpaired boxes false negatives.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import linear_sum_assignment

from app.core.errors import KiwicalError, MissingAnnotationError
from app.core.types import DatasetManifest, Detection, GroundTruthBox, LightingClass
from app.db.annotations import detections_path, load_annotations, load_detections

logger = logging.getLogger(__name__)

DEFAULT_MATCH_THRESHOLD = 20.0
DEFAULT_BIG_COST = 1e6


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    match_threshold: float = Field(default=DEFAULT_MATCH_THRESHOLD, gt=0.0)
    big_cost: float = DEFAULT_BIG_COST
    distance_mode: Literal["center", "box"] = "center"
    average: Literal["micro", "macro"] = "micro"

    @model_validator(mode="after")
    def _check_big_cost(self):
        if not self.big_cost > self.match_threshold:
            raise ValueError("big_cost must exceed match_threshold")
        return self


class MatchPair(BaseModel):
    model_config = ConfigDict(frozen=True)

    det: int = Field(ge=0)
    gt: int = Field(ge=0)
    distance: float = Field(ge=0.0)


class MatchReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    pairs: List[MatchPair] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_pairs(self):
        if self.tp != len(self.pairs):
            raise ValueError("tp must equal the number of pairs")
        dets = [p.det for p in self.pairs]
        gts = [p.gt for p in self.pairs]
        if len(set(dets)) != len(dets) or len(set(gts)) != len(gts):
            raise ValueError("a detection or ground truth appears in more than one pair")
        return self

    @property
    def matched_gts(self) -> set:
        return {p.gt for p in self.pairs}

    @property
    def matched_dets(self) -> set:
        return {p.det for p in self.pairs}


class Metrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    recall: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    # Set when the denominator was zero and the value was reported as 0
    recall_undefined: bool = False
    precision_undefined: bool = False


class OccluderStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int
    share: float
    recall: float


class OcclusionBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True)

    recall_non_occluded: float
    recall_occluded: float
    occluder_histogram: Dict[str, int]
    percent_non_occluded: float
    per_occluder: Dict[str, OccluderStats] = Field(default_factory=dict)
    recall_non_occluded_undefined: bool = False
    recall_occluded_undefined: bool = False


@dataclass(frozen=True)
class Assignment:
    pairs: Tuple[Tuple[int, int], ...]
    total: float


def _ratio(num: int, den: int) -> Tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def _distance(det: Detection, gt: GroundTruthBox, mode: str) -> float:
    if mode == "box":
        dx = max(gt.x_min - det.center_x, 0.0, det.center_x - gt.x_max)
        dy = max(gt.y_min - det.center_y, 0.0, det.center_y - gt.y_max)
        return math.hypot(dx, dy)
    gx, gy = gt.center
    return math.hypot(det.center_x - gx, det.center_y - gy)


def cost_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], cfg: Optional[EvalConfig] = None) -> np.ndarray:
    """
    Pairwise detection-to-box distances, gated.

    Entries farther than cfg.match_threshold are replaced by cfg.big_cost.

    Returns:
        A (len(dets), len(gts)) float64 matrix
    """
    cfg = cfg or EvalConfig()
    costs = np.empty((len(dets), len(gts)), dtype=np.float64)
    for i, det in enumerate(dets):
        for j, gt in enumerate(gts):
            costs[i, j] = _distance(det, gt, cfg.distance_mode)
    costs[costs > cfg.match_threshold] = cfg.big_cost
    return costs


def hungarian_assign(costs: np.ndarray, big_cost: float = DEFAULT_BIG_COST) -> Assignment:
    """
    Minimum-cost one-to-one assignment of rows to columns.

    A rectangular matrix is padded to square with big_cost; every complete
    assignment uses the same number of padding cells, so the optimum over the
    real cells is unchanged. Pairs that land on padding are dropped.

    Args:
        costs: Finite 2-D cost matrix, possibly empty or rectangular
        big_cost: Value used for padding

    Returns:
        The (row, column) pairs in row order and their total cost
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
    rows, cols = costs.shape
    if rows == 0 or cols == 0:
        return Assignment(pairs=(), total=0.0)
    if not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix must be finite")

    n = max(rows, cols)
    square = np.full((n, n), big_cost, dtype=np.float64)
    square[:rows, :cols] = costs
    row_ind, col_ind = linear_sum_assignment(square)

    pairs = tuple((int(r), int(c)) for r, c in zip(row_ind, col_ind) if r < rows and c < cols)
    total = float(sum(costs[r, c] for r, c in pairs))
    return Assignment(pairs=pairs, total=total)


def match(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], cfg: Optional[EvalConfig] = None) -> MatchReport:
    cfg = cfg or EvalConfig()
    costs = cost_matrix(dets, gts, cfg)
    assignment = hungarian_assign(costs, cfg.big_cost)

    pairs = []
    for i, j in assignment.pairs:
        if costs[i, j] >= cfg.big_cost:
            continue
        distance = _distance(dets[i], gts[j], cfg.distance_mode)
        if distance <= cfg.match_threshold:
            pairs.append(MatchPair(det=i, gt=j, distance=distance))

    tp = len(pairs)
    return MatchReport(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp, pairs=pairs)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    recall, recall_undefined = _ratio(tp, tp + fn)
    precision, precision_undefined = _ratio(tp, tp + fp)
    return Metrics(
        recall=recall,
        precision=precision,
        f1=f1_score(precision, recall),
        recall_undefined=recall_undefined,
        precision_undefined=precision_undefined,
    )


def metrics(report: MatchReport) -> Metrics:
    return metrics_from_counts(report.tp, report.fp, report.fn)


def aggregate(reports: Sequence[MatchReport], average: str = "micro") -> Metrics:
    """
    Combine per-image reports into one set of metrics.

    micro sums TP, FP and FN over images first. macro averages per-image
    recall and precision and derives F1 from the averages.
    """
    if average == "micro":
        return metrics_from_counts(
            sum(r.tp for r in reports),
            sum(r.fp for r in reports),
            sum(r.fn for r in reports),
        )
    if average != "macro":
        raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
    if not reports:
        return metrics_from_counts(0, 0, 0)

    per_image = [metrics(r) for r in reports]
    recall = float(np.mean([m.recall for m in per_image]))
    precision = float(np.mean([m.precision for m in per_image]))
    return Metrics(
        recall=recall,
        precision=precision,
        f1=f1_score(precision, recall),
        recall_undefined=all(m.recall_undefined for m in per_image),
        precision_undefined=all(m.precision_undefined for m in per_image),
    )


def occlusion_breakdown_many(items: Iterable[Tuple[MatchReport, Sequence[GroundTruthBox]]]) -> OcclusionBreakdown:
    """
    Recall split by occlusion status, pooled over several images.

    Raises:
        MissingAnnotationError: A ground-truth box carries no occlusion flag
    """
    totals = {True: 0, False: 0}
    found = {True: 0, False: 0}
    kind_total: Dict[str, int] = {}
    kind_found: Dict[str, int] = {}

    for report, gts in items:
        matched = report.matched_gts
        for j, gt in enumerate(gts):
            if gt.occluded is None:
                raise MissingAnnotationError(f"ground-truth box {j} has no occlusion annotation")
            hit = j in matched
            totals[gt.occluded] += 1
            found[gt.occluded] += int(hit)
            if gt.occluded:
                kind = gt.occluder.value
                kind_total[kind] = kind_total.get(kind, 0) + 1
                kind_found[kind] = kind_found.get(kind, 0) + int(hit)

    recall_non, non_undefined = _ratio(found[False], totals[False])
    recall_occ, occ_undefined = _ratio(found[True], totals[True])
    n_total = totals[True] + totals[False]
    percent_non, _ = _ratio(totals[False], n_total)

    per_occluder = {
        kind: OccluderStats(count=count, share=count / n_total, recall=kind_found[kind] / count)
        for kind, count in sorted(kind_total.items())
    }
    return OcclusionBreakdown(
        recall_non_occluded=recall_non,
        recall_occluded=recall_occ,
        occluder_histogram=dict(sorted(kind_total.items())),
        percent_non_occluded=percent_non,
        per_occluder=per_occluder,
        recall_non_occluded_undefined=non_undefined,
        recall_occluded_undefined=occ_undefined,
    )


def occlusion_breakdown(report: MatchReport, gts: Sequence[GroundTruthBox]) -> OcclusionBreakdown:
    return occlusion_breakdown_many([(report, gts)])


def density(manifest: DatasetManifest) -> float:
    """Mean number of ground-truth calyces per image."""
    total = 0
    for entry in manifest.entries:
        if not entry.annotation_path:
            raise MissingAnnotationError(f"{entry.image_path} has no annotation file")
        total += len(load_annotations(entry.annotation_path))
    return total / len(manifest.entries)


class ImageEvaluation(BaseModel):
    model_config = ConfigDict(frozen=True)

    image: str
    lighting: LightingClass
    report: MatchReport
    metrics: Metrics


class EvaluationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    manifest: str
    average: str
    overall: Metrics
    tp: int
    fp: int
    fn: int
    per_lighting: Dict[str, Metrics]
    occlusion: Optional[OcclusionBreakdown] = None
    density: float
    images: List[ImageEvaluation]
    errors: Dict[str, str] = Field(default_factory=dict)


def evaluate_dataset(
    manifest: DatasetManifest,
    detections_dir: str,
    cfg: Optional[EvalConfig] = None,
    lighting_of=None,
    manifest_name: Optional[str] = None,
) -> EvaluationReport:
    """
    Evaluate stored detections against a manifest's annotations.

    Detection files are looked up as <detections_dir>/<image stem>.json. An
    image whose files cannot be read is recorded in `errors` and left out of
    the metrics.

    Args:
        manifest: Images with annotations and optional lighting labels
        detections_dir: Directory of detection documents
        cfg: Matching and averaging settings
        lighting_of: Callable giving the lighting class of an unlabelled image path
        manifest_name: Name to report instead of the manifest's own
    """
    cfg = cfg or EvalConfig()
    images: List[ImageEvaluation] = []
    truths: List[List[GroundTruthBox]] = []
    errors: Dict[str, str] = {}
    n_boxes = 0

    for entry in manifest.entries:
        try:
            if not entry.annotation_path:
                raise MissingAnnotationError(f"{entry.image_path} has no annotation file")
            gts = load_annotations(entry.annotation_path)
            dets = load_detections(detections_path(detections_dir, entry.image_path))
            lighting = entry.lighting_label
            if lighting is None:
                if lighting_of is None:
                    raise MissingAnnotationError(f"{entry.image_path} has no lighting label")
                lighting = lighting_of(entry.image_path)
        except (KiwicalError, OSError) as e:
            logger.warning("Skipping %s: %s", entry.image_path, e)
            errors[entry.image_path] = str(e)
            continue

        report = match(dets, gts, cfg)
        n_boxes += len(gts)
        truths.append(gts)
        images.append(ImageEvaluation(image=entry.image_path, lighting=lighting, report=report, metrics=metrics(report)))

    reports = [im.report for im in images]
    per_lighting = {}
    for cls in LightingClass:
        subset = [im.report for im in images if im.lighting == cls]
        if subset:
            per_lighting[cls.value] = aggregate(subset, cfg.average)

    try:
        occlusion = occlusion_breakdown_many(zip(reports, truths))
    except MissingAnnotationError as e:
        logger.info("No occlusion breakdown: %s", e)
        occlusion = None

    logger.info("Evaluated %d/%d images of %s", len(images), len(manifest.entries), manifest.name)
    return EvaluationReport(
        manifest=manifest_name or manifest.name,
        average=cfg.average,
        overall=aggregate(reports, cfg.average),
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        per_lighting=per_lighting,
        occlusion=occlusion,
        density=n_boxes / len(images) if images else 0.0,
        images=images,
        errors=errors,
    )
