import json
import os

import pytest

from app.core.config import PipelineConfig, build_config, deep_merge, default_workers, load_config
from app.core.errors import SchemaError
from app.core.types import LightingClass


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.tile.width, cfg.tile.height, cfg.tile.overlap) == (500, 500, 0.2)
    assert (cfg.blobs.min_area, cfg.blobs.min_circularity, cfg.blobs.connectivity) == (150, 0.5, 8)
    assert (cfg.eval.match_threshold, cfg.eval.big_cost) == (20.0, 1e6)
    assert (cfg.eval.distance_mode, cfg.eval.average) == ("center", "micro")
    assert cfg.sat_threshold == 255
    assert cfg.saturation_mode == "intersection"
    assert cfg.backend == "reference"
    assert cfg.preprocess.enabled and cfg.preprocess.glare_he_tiles == "disjoint"


def test_deep_merge():
    base = {"a": {"b": 1, "c": 2}, "d": 3}
    assert deep_merge(base, {"a": {"c": 5}, "e": 6}) == {"a": {"b": 1, "c": 5}, "d": 3, "e": 6}
    assert base == {"a": {"b": 1, "c": 2}, "d": 3}


class TestBuildConfig:
    def test_partial_override(self):
        cfg = build_config({"tile": {"overlap": 0.5}}, {"preprocess": {"force_class": "glare"}})
        assert cfg.tile.overlap == 0.5
        assert cfg.tile.width == 500
        assert cfg.preprocess.force_class == LightingClass.GLARE

    def test_later_documents_win(self):
        assert build_config({"blobs": {"min_area": 10}}, {"blobs": {"min_area": 20}}).blobs.min_area == 20

    @pytest.mark.parametrize("document", [
        {"tiles": {"width": 400}},
        {"tile": {"overlap": 0.95}},
        {"sat_threshold": 0},
        {"saturation_mode": "union"},
        {"eval": {"average": "weighted"}},
    ])
    def test_invalid(self, document):
        with pytest.raises(SchemaError):
            build_config(document)


class TestLoadConfig:
    def test_file_and_overrides(self, tmp_path):
        path = os.path.join(tmp_path, "cfg.json")
        with open(path, "w") as f:
            json.dump({"blobs": {"min_area": 90, "connectivity": 4}}, f)
        cfg = load_config(path, {"blobs": {"min_area": 100}})
        assert (cfg.blobs.min_area, cfg.blobs.connectivity) == (100, 4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError):
            load_config(os.path.join(tmp_path, "missing.json"))

    def test_bad_json(self, tmp_path):
        path = os.path.join(tmp_path, "cfg.json")
        with open(path, "w") as f:
            f.write("{tile:")
        with pytest.raises(SchemaError):
            load_config(path)

    def test_not_an_object(self, tmp_path):
        path = os.path.join(tmp_path, "cfg.json")
        with open(path, "w") as f:
            json.dump([1, 2], f)
        with pytest.raises(SchemaError):
            load_config(path)


def test_default_workers(monkeypatch):
    monkeypatch.setenv("KIWICAL_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("KIWICAL_WORKERS", "many")
    assert default_workers() >= 1
