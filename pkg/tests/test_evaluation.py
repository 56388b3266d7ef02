import itertools
import os

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import MissingAnnotationError
from app.core.evaluation import (
    EvalConfig,
    MatchReport,
    aggregate,
    cost_matrix,
    density,
    evaluate_dataset,
    f1_score,
    hungarian_assign,
    match,
    metrics,
    metrics_from_counts,
    occlusion_breakdown,
)
from app.core.types import DatasetManifest, ManifestEntry
from app.db.annotations import detections_path, save_annotations, save_detections
from tests.helpers import box_at, det_at


def brute_force_min(costs):
    rows, cols = costs.shape
    if rows <= cols:
        return min(sum(costs[i, p[i]] for i in range(rows)) for p in itertools.permutations(range(cols), rows))
    return min(sum(costs[p[j], j] for j in range(cols)) for p in itertools.permutations(range(rows), cols))


class TestHungarian:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            rows, cols = rng.integers(1, 7, size=2)
            costs = rng.integers(0, 50, size=(rows, cols)).astype(float)
            assignment = hungarian_assign(costs)
            assert len(assignment.pairs) == min(rows, cols)
            assert len({r for r, _ in assignment.pairs}) == len(assignment.pairs)
            assert len({c for _, c in assignment.pairs}) == len(assignment.pairs)
            assert assignment.total == pytest.approx(brute_force_min(costs))

    def test_empty(self):
        assert hungarian_assign(np.zeros((0, 3))).pairs == ()

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            hungarian_assign(np.array([[1.0, np.inf]]))


class TestMatch:
    def test_optimal_where_greedy_fails(self):
        gts = [box_at(100, 100), box_at(130, 100)]
        dets = [det_at(110, 100), det_at(88, 100)]
        report = match(dets, gts)
        assert (report.tp, report.fp, report.fn) == (2, 0, 0)
        assert {(p.det, p.gt) for p in report.pairs} == {(0, 1), (1, 0)}

    def test_threshold_is_inclusive(self):
        gts = [box_at(100, 100)]
        assert match([det_at(120, 100)], gts).tp == 1
        report = match([det_at(120.5, 100)], gts)
        assert (report.tp, report.fp, report.fn) == (0, 1, 1)

    def test_empty_sides(self):
        assert match([], []) == MatchReport(tp=0, fp=0, fn=0)
        assert (match([det_at(5, 5)], []).fp, match([], [box_at(50, 50)]).fn) == (1, 1)

    def test_box_distance_mode(self):
        gts = [box_at(100, 100, half=15)]
        det = det_at(125, 100)
        assert match([det], gts).tp == 0
        report = match([det], gts, EvalConfig(distance_mode="box"))
        assert report.tp == 1
        assert report.pairs[0].distance == pytest.approx(10.0)

    def test_cost_matrix_gating(self):
        costs = cost_matrix([det_at(0, 0)], [box_at(10, 0), box_at(100, 0)])
        assert costs[0, 0] == pytest.approx(10.0)
        assert costs[0, 1] == EvalConfig().big_cost

    def test_big_cost_must_exceed_threshold(self):
        with pytest.raises(ValidationError):
            EvalConfig(match_threshold=20, big_cost=10)


class TestMetrics:
    @pytest.mark.parametrize("recall,precision,expected", [
        (0.74, 0.92, 0.82),
        (0.41, 0.70, 0.52),
        (0.45, 0.70, 0.55),
        (0.07, 0.64, 0.13),
        (0.30, 0.71, 0.42),
    ])
    def test_f1_reproduces_reported_rows(self, recall, precision, expected):
        assert abs(f1_score(precision, recall) - expected) <= 0.005

    def test_counts(self):
        m = metrics_from_counts(tp=8, fp=2, fn=4)
        assert m.recall == pytest.approx(8 / 12)
        assert m.precision == pytest.approx(0.8)
        assert m.f1 == pytest.approx(2 * 0.8 * (8 / 12) / (0.8 + 8 / 12), abs=1e-12)

    def test_zero_denominators(self):
        m = metrics(MatchReport(tp=0, fp=0, fn=0))
        assert (m.recall, m.precision, m.f1) == (0.0, 0.0, 0.0)
        assert m.recall_undefined and m.precision_undefined

    def test_micro_and_macro(self):
        pair = [{"det": 0, "gt": 0, "distance": 0.0}]
        reports = [MatchReport(tp=1, fp=0, fn=0, pairs=pair), MatchReport(tp=0, fp=0, fn=3)]
        micro = aggregate(reports, "micro")
        assert (micro.recall, micro.precision) == (0.25, 1.0)
        macro = aggregate(reports, "macro")
        assert (macro.recall, macro.precision) == (0.5, 0.5)
        assert macro.f1 == pytest.approx(0.5)

    def test_report_pairs_consistent(self):
        with pytest.raises(ValidationError):
            MatchReport(tp=2, fp=0, fn=0, pairs=[{"det": 0, "gt": 0, "distance": 1.0}])


class TestOcclusion:
    def test_breakdown(self):
        gts = [
            box_at(50, 50, occluded=False),
            box_at(100, 50, occluded=False),
            box_at(150, 50, occluded=True, occluder="leaf"),
            box_at(200, 50, occluded=True, occluder="wire"),
        ]
        dets = [det_at(50, 50), det_at(100, 50), det_at(150, 50)]
        result = occlusion_breakdown(match(dets, gts), gts)
        assert result.recall_non_occluded == 1.0
        assert result.recall_occluded == 0.5
        assert result.occluder_histogram == {"leaf": 1, "wire": 1}
        assert result.percent_non_occluded == 0.5
        assert result.per_occluder["leaf"].recall == 1.0
        assert result.per_occluder["wire"].share == 0.25

    def test_missing_flag(self):
        gts = [box_at(50, 50)]
        with pytest.raises(MissingAnnotationError):
            occlusion_breakdown(match([], gts), gts)

    def test_no_occluded_boxes(self):
        gts = [box_at(50, 50, occluded=False)]
        result = occlusion_breakdown(match([det_at(50, 50)], gts), gts)
        assert result.recall_occluded == 0.0 and result.recall_occluded_undefined


def write_truth(tmp_path, name, count):
    path = os.path.join(tmp_path, f"{name}.json")
    save_annotations([box_at(20.0 + i, 20.0, occluded=False) for i in range(count)], path)
    return path


class TestDensity:
    def test_mean_calyces_per_image(self, tmp_path):
        entries = []
        for i in range(50):
            path = write_truth(tmp_path, f"img_{i:02d}", 63 if i < 35 else 62)
            entries.append(ManifestEntry(image_path=f"img_{i:02d}.png", annotation_path=path))
        assert density(DatasetManifest(name="occlusion", entries=entries)) == pytest.approx(62.7)

    def test_missing_annotation(self):
        manifest = DatasetManifest(name="d", entries=[ManifestEntry(image_path="a.png")])
        with pytest.raises(MissingAnnotationError):
            density(manifest)


class TestEvaluateDataset:
    def test_report(self, tmp_path):
        truth = [box_at(50, 50, occluded=False), box_at(150, 50, occluded=True, occluder="branch")]
        det_dir = os.path.join(tmp_path, "dets")
        entries = []
        for stem, lighting, dets in (
            ("a", "typical", [det_at(50, 50), det_at(150, 52)]),
            ("b", "glare", [det_at(50, 50), det_at(300, 300)]),
        ):
            ann = os.path.join(tmp_path, f"{stem}.json")
            save_annotations(truth, ann)
            save_detections(dets, detections_path(det_dir, f"{stem}.png"))
            entries.append(ManifestEntry(image_path=f"/imgs/{stem}.png", annotation_path=ann, lighting_label=lighting))
        # No detection file for this one
        ann = os.path.join(tmp_path, "c.json")
        save_annotations(truth, ann)
        entries.append(ManifestEntry(image_path="/imgs/c.png", annotation_path=ann, lighting_label="typical"))

        report = evaluate_dataset(DatasetManifest(name="mix", entries=entries), det_dir)
        assert (report.tp, report.fp, report.fn) == (3, 1, 1)
        assert report.overall.recall == pytest.approx(0.75)
        assert report.per_lighting["typical"].f1 == 1.0
        assert report.per_lighting["glare"].recall == 0.5
        assert report.occlusion.percent_non_occluded == 0.5
        assert report.occlusion.recall_occluded == 0.5
        assert report.density == 2.0
        assert list(report.errors) == ["/imgs/c.png"]

    def test_lighting_falls_back_to_classifier(self, tmp_path):
        ann = write_truth(tmp_path, "a", 1)
        save_detections([], detections_path(os.path.join(tmp_path, "dets"), "a.png"))
        manifest = DatasetManifest(name="d", entries=[ManifestEntry(image_path="/x/a.png", annotation_path=ann)])
        report = evaluate_dataset(manifest, os.path.join(tmp_path, "dets"), lighting_of=lambda p: "overexposed")
        assert list(report.per_lighting) == ["overexposed"]
        assert report.overall.recall == 0.0
