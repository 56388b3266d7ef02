import json
import os

import numpy as np
import pytest
from PIL import Image
from pydantic import ValidationError

from app.core.errors import (
    AnnotationParseError,
    CorruptDataError,
    ImageNotFoundError,
    SchemaError,
    UnsupportedFormatError,
)
from app.core.image import RgbImage, load_image, save_image
from app.core.types import ClassMap, DatasetManifest, GroundTruthBox, ManifestEntry, OccluderKind, ProbMap
from app.db.annotations import (
    load_annotations,
    load_detections,
    load_manifest,
    save_annotations,
    save_detections,
    save_manifest,
)
from tests.helpers import box_at, det_at


class TestRasterTypes:
    def test_rgb_image_is_read_only(self):
        img = RgbImage(np.zeros((4, 5, 3), dtype=np.uint8))
        assert (img.width, img.height, img.size) == (5, 4, 20)
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1

    def test_rgb_image_rejects_wrong_dtype_and_shape(self):
        with pytest.raises(ValueError):
            RgbImage(np.zeros((4, 5, 3), dtype=np.uint16))
        with pytest.raises(ValueError):
            RgbImage(np.zeros((4, 5), dtype=np.uint8))

    def test_prob_map_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ProbMap(np.full((2, 2, 4), 0.2, dtype=np.float32))
        pm = ProbMap(np.full((2, 3, 4), 0.25, dtype=np.float32))
        assert (pm.width, pm.height, pm.classes) == (3, 2, 4)

    def test_class_map_label_range(self):
        with pytest.raises(ValueError):
            ClassMap(labels=np.full((2, 2), 4), confidence=np.ones((2, 2)))


class TestGroundTruthBox:
    def test_non_occluded_defaults_to_no_occluder(self):
        box = GroundTruthBox(x_min=0, y_min=0, x_max=10, y_max=10, occluded=False)
        assert box.occluder == OccluderKind.NONE
        assert box.center == (5.0, 5.0)

    def test_occluded_needs_kind(self):
        with pytest.raises(ValidationError):
            GroundTruthBox(x_min=0, y_min=0, x_max=10, y_max=10, occluded=True)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            GroundTruthBox(x_min=10, y_min=0, x_max=10, y_max=10)

    def test_unknown_occlusion(self):
        box = GroundTruthBox(x_min=0, y_min=0, x_max=4, y_max=4)
        assert box.occluded is None and box.occluder is None


class TestImageFiles:
    def test_png_and_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        img = RgbImage(rng.integers(0, 256, size=(7, 9, 3), dtype=np.uint8))
        for name in ("a.png", "a.ppm"):
            path = os.path.join(tmp_path, name)
            save_image(img, path)
            assert load_image(path) == img

    def test_alpha_is_dropped(self, tmp_path):
        path = os.path.join(tmp_path, "rgba.png")
        Image.new("RGBA", (4, 3), (10, 20, 30, 40)).save(path)
        img = load_image(path)
        assert img.pixels.shape == (3, 4, 3)
        assert tuple(img.pixels[0, 0]) == (10, 20, 30)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageNotFoundError):
            load_image(os.path.join(tmp_path, "nope.png"))

    def test_unknown_format(self, tmp_path):
        path = os.path.join(tmp_path, "x.png")
        with open(path, "wb") as f:
            f.write(b"GIF89a not a png")
        with pytest.raises(UnsupportedFormatError):
            load_image(path)

    def test_sixteen_bit_png_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "deep.png")
        Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(path)
        with pytest.raises(UnsupportedFormatError):
            load_image(path)

    def test_truncated_png(self, tmp_path, image_file):
        with open(image_file, "rb") as f:
            data = f.read()
        path = os.path.join(tmp_path, "cut.png")
        with open(path, "wb") as f:
            f.write(data[: len(data) // 2])
        with pytest.raises(CorruptDataError):
            load_image(path)

    def test_cannot_write_jpeg(self, tmp_path):
        with pytest.raises(UnsupportedFormatError):
            save_image(RgbImage.filled(2, 2), os.path.join(tmp_path, "x.jpg"))


class TestAnnotationFiles:
    def test_annotations_keep_count_and_order(self, tmp_path):
        boxes = [box_at(20.0 + 5 * i, 30.0, occluded=i % 3 == 0, occluder="leaf" if i % 3 == 0 else None)
                 for i in range(62)]
        path = os.path.join(tmp_path, "truth.json")
        save_annotations(boxes, path)
        loaded = load_annotations(path)
        assert len(loaded) == 62
        assert loaded == boxes

    def test_detections_keep_input_order(self, tmp_path):
        dets = [det_at(10.0 + i, 20.0, confidence=(i % 10) / 10) for i in range(83)]
        path = os.path.join(tmp_path, "dets.json")
        save_detections(dets, path)
        with open(path) as f:
            document = json.load(f)
        assert len(document["detections"]) == 83
        assert set(document["detections"][0]) == {"cx", "cy", "radius", "confidence"}
        assert load_detections(path) == dets

    def test_invalid_json(self, tmp_path):
        path = os.path.join(tmp_path, "bad.json")
        with open(path, "w") as f:
            f.write("{not json")
        with pytest.raises(AnnotationParseError):
            load_annotations(path)

    def test_schema_errors(self, tmp_path):
        path = os.path.join(tmp_path, "bad.json")
        with open(path, "w") as f:
            json.dump({"boxes": [{"x_min": 5, "y_min": 0, "x_max": 1, "y_max": 4}]}, f)
        with pytest.raises(SchemaError):
            load_annotations(path)
        with open(path, "w") as f:
            json.dump({"items": []}, f)
        with pytest.raises(SchemaError):
            load_annotations(path)


class TestManifest:
    def test_relative_paths_resolve_against_manifest(self, tmp_path):
        manifest = DatasetManifest(name="orchard", entries=[
            ManifestEntry(image_path="a.png", annotation_path="a.json", lighting_label="glare"),
            ManifestEntry(image_path="b.png"),
        ])
        path = os.path.join(tmp_path, "sub", "manifest.json")
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.name == "orchard"
        assert loaded.entries[0].image_path == os.path.join(tmp_path, "sub", "a.png")
        assert loaded.entries[0].annotation_path == os.path.join(tmp_path, "sub", "a.json")
        assert loaded.entries[0].lighting_label.value == "glare"
        assert loaded.entries[1].annotation_path is None

    def test_duplicate_images_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "manifest.json")
        with open(path, "w") as f:
            json.dump({"name": "d", "entries": [{"image": "a.png"}, {"image": "a.png"}]}, f)
        with pytest.raises(SchemaError):
            load_manifest(path)

    def test_empty_manifest_rejected(self):
        with pytest.raises(ValidationError):
            DatasetManifest(name="d", entries=[])
