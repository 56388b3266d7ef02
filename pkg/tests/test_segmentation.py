import os
import struct

import numpy as np
import pytest

from app.core.errors import BackendFailureError, InvalidParamError, TileTooLargeError
from app.core.image import RgbImage, load_image
from app.core.segmentation import (
    BRANCH_KEY,
    CALYX_KEY,
    DEFAULT_RULES,
    WIRE_KEY,
    ChromaRule,
    PmapFileBackend,
    ReferenceBackend,
    SegmenterContract,
    argmax_classmap,
    file_backend_segment,
    make_backend,
    reference_segment,
    segment,
)
from app.core.types import ClassId, ProbMap
from app.db.pmap_store import PmapStore, read_pmap, write_pmap
from tests.helpers import make_scene


def uniform_rest(cls, p=0.99):
    values = np.full(4, (1.0 - p) / 3.0, dtype=np.float32)
    values[int(cls)] = p
    return values


class TestReferenceSegment:
    def test_key_colours(self):
        pixels = np.array([[CALYX_KEY, BRANCH_KEY, WIRE_KEY, (60, 245, 228)]], dtype=np.uint8)
        pm = ReferenceBackend().predict(RgbImage(pixels))
        cm = argmax_classmap(pm)
        assert cm.labels.tolist() == [[ClassId.CALYX, ClassId.BRANCH, ClassId.WIRE, ClassId.BACKGROUND]]
        assert np.allclose(cm.confidence, 0.99)
        assert np.allclose(pm.values[0, 0], uniform_rest(ClassId.CALYX))

    def test_calyx_disk_in_background(self, image_file):
        pm = ReferenceBackend().predict(load_image(image_file))
        assert pm.values[60, 80, ClassId.CALYX] >= 0.99
        assert pm.values[5, 5, ClassId.BACKGROUND] >= 0.99

    def test_grey_pixels_fail_blue_gap(self):
        pixels = np.array([[(30, 30, 30), (110, 40, 20)]], dtype=np.uint8)
        cm = argmax_classmap(ReferenceBackend().predict(RgbImage(pixels)))
        assert cm.labels.tolist() == [[ClassId.BACKGROUND, ClassId.CALYX]]

    def test_first_matching_rule_wins(self):
        rules = [
            ChromaRule(ClassId.WIRE, (100, 100, 100), (10, 10, 10)),
            ChromaRule(ClassId.BRANCH, (100, 100, 100), (50, 50, 50)),
        ]
        pixels = np.array([[(105, 95, 100), (140, 100, 100), (0, 0, 0)]], dtype=np.uint8)
        cm = argmax_classmap(reference_segment(rules, RgbImage(pixels)))
        assert cm.labels.tolist() == [[ClassId.WIRE, ClassId.BRANCH, ClassId.BACKGROUND]]

    @pytest.mark.parametrize("x0,y0,w,h", [(0, 0, 50, 40), (123, 77, 200, 150), (311, 209, 89, 91)])
    def test_crop_matches_full_image(self, x0, y0, w, h):
        image = make_scene(seed=2, width=400, height=300, n_calyces=20).image
        full = reference_segment(DEFAULT_RULES, image).values
        crop = reference_segment(DEFAULT_RULES, RgbImage(image.pixels[y0:y0 + h, x0:x0 + w])).values
        assert np.array_equal(crop, full[y0:y0 + h, x0:x0 + w])


class TestArgmax:
    def test_picks_largest(self):
        pm = ProbMap(np.array([[[0.1, 0.7, 0.1, 0.1]]], dtype=np.float32))
        cm = argmax_classmap(pm)
        assert cm.labels[0, 0] == ClassId.CALYX
        assert cm.confidence[0, 0] == pytest.approx(0.7)

    def test_tie_goes_to_lowest_id(self):
        cm = argmax_classmap(ProbMap(np.full((1, 1, 4), 0.25, dtype=np.float32)))
        assert cm.labels[0, 0] == ClassId.BACKGROUND


class TestSegmentContract:
    def test_oversized_tile_rejected(self):
        backend = ReferenceBackend(contract=SegmenterContract(max_tile_w=500, max_tile_h=500))
        with pytest.raises(TileTooLargeError):
            segment(backend, RgbImage.filled(501, 10))

    def test_wrong_sized_output_is_backend_failure(self):
        class Shrinking(ReferenceBackend):
            def predict(self, tile, tile_id=None):
                return ProbMap(np.full((1, 1, 4), 0.25, dtype=np.float32))

        with pytest.raises(BackendFailureError):
            segment(Shrinking(), RgbImage.filled(4, 4))

    def test_make_backend(self, tmp_path):
        assert isinstance(make_backend("reference"), ReferenceBackend)
        backend = make_backend(f"pmap:{tmp_path}")
        assert isinstance(backend, PmapFileBackend)
        with pytest.raises(InvalidParamError):
            make_backend("fcn")


class TestPmapFiles:
    def test_write_then_read(self, tmp_path):
        rng = np.random.default_rng(1)
        raw = rng.random((3, 5, 4))
        pm = ProbMap((raw / raw.sum(axis=2, keepdims=True)).astype(np.float32))
        path = os.path.join(tmp_path, "tile_0.pmap")
        write_pmap(pm, path)
        assert os.path.getsize(path) == 16 + 3 * 5 * 4 * 4
        loaded = read_pmap(path, expected_shape=(5, 3))
        assert np.allclose(loaded.values, pm.values, atol=1e-6)

    def test_unnormalized_rows_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "tile_0.pmap")
        with open(path, "wb") as f:
            f.write(struct.pack("<4sIII", b"PMAP", 1, 1, 4))
            f.write(np.array([0.2, 0.2, 0.2, 0.2], dtype="<f4").tobytes())
        with pytest.raises(BackendFailureError):
            read_pmap(path)

    def test_bad_header_and_size(self, tmp_path):
        path = os.path.join(tmp_path, "tile_0.pmap")
        with open(path, "wb") as f:
            f.write(struct.pack("<4sIII", b"PMAQ", 1, 1, 4))
            f.write(uniform_rest(ClassId.CALYX).astype("<f4").tobytes())
        with pytest.raises(BackendFailureError):
            read_pmap(path)

        write_pmap(ProbMap(np.full((2, 2, 4), 0.25, dtype=np.float32)), path)
        with pytest.raises(BackendFailureError):
            read_pmap(path, expected_shape=(3, 2))

    def test_missing_file(self, tmp_path):
        with pytest.raises(BackendFailureError):
            file_backend_segment(str(tmp_path), 7)

    def test_backend_replays_per_image_directory(self, tmp_path):
        store = PmapStore(os.path.join(tmp_path, "frame_01"))
        store.save(0, ProbMap(np.tile(uniform_rest(ClassId.CALYX), (4, 6, 1))))

        backend = PmapFileBackend(str(tmp_path)).for_image("/data/frame_01.png")
        cm = argmax_classmap(segment(backend, RgbImage.filled(6, 4), 0))
        assert np.all(cm.labels == ClassId.CALYX)

        with pytest.raises(BackendFailureError):
            segment(PmapFileBackend(str(tmp_path)), RgbImage.filled(6, 4))
