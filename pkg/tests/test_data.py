"""Tests for synthetic scenes, annotations, PGM I/O and dataset manifests."""
import json
import math

import numpy as np
import pytest

from densetok.data import (
    Scene,
    SynthConfig,
    augment,
    decode_pgm,
    encode_pgm,
    flip_scene,
    format_annotations,
    load_manifest,
    load_scenes,
    load_split_file,
    parse_annotation_text,
    read_pgm,
    split_ids,
    synth_scene,
    write_dataset,
    write_pgm,
)
from densetok.errors import ConfigError, DataError
from densetok.geometry import RotatedBox, box_inside_image


# ---------------------------------------------------------------------------
# Synthesis tests
# ---------------------------------------------------------------------------

class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig()
        a, b = synth_scene(cfg, 3), synth_scene(cfg, 3)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.boxes == b.boxes
        assert a.id == "scene_00003"

    def test_seed_changes_scene(self):
        a = synth_scene(SynthConfig(seed=1), 0)
        b = synth_scene(SynthConfig(seed=2), 0)
        assert not np.array_equal(a.image, b.image)

    def test_image_range_and_shape(self):
        scene = synth_scene(SynthConfig(), 0)
        assert scene.image.shape == (1, 64, 64)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0

    def test_targets_inside_and_one_per_cell(self):
        cfg = SynthConfig()
        for index in range(10):
            scene = synth_scene(cfg, index)
            cells = [(int(b.cy // cfg.cell_size), int(b.cx // cfg.cell_size)) for b in scene.boxes]
            assert len(cells) == len(set(cells))
            assert all(box_inside_image(b, 64, 64) for b in scene.boxes)
            assert all(b.w >= b.h for b in scene.boxes)

    def test_targets_brighter_than_background(self):
        cfg = SynthConfig(speckle_looks=64, clutter_blob_count=0)
        scene = synth_scene(cfg, 5)
        if not scene.boxes:
            pytest.skip("scene drew no targets")
        box = scene.boxes[0]
        peak = scene.image[0, int(round(box.cy)), int(round(box.cx))]
        assert peak > 2 * cfg.background_mean

    @pytest.mark.parametrize("overrides", [
        {"extent_range": (10.0, 6.0)},
        {"extent_range": (3.0, 6.0)},
        {"speckle_looks": 0},
        {"image_size": 60},
        {"val_stride": 1},
        {"class_names": ()},
    ])
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigError):
            SynthConfig(**overrides)

    def test_scene_rejects_outside_center(self):
        with pytest.raises(DataError):
            Scene(image=np.zeros((1, 8, 8)), boxes=[RotatedBox(9.0, 2.0, 2, 1)], id="x")


# ---------------------------------------------------------------------------
# Augmentation tests
# ---------------------------------------------------------------------------

class TestAugment:
    def test_flip_moves_image_and_boxes(self):
        image = np.zeros((1, 8, 8))
        image[0, 2, 1] = 1.0
        scene = Scene(image=image, boxes=[RotatedBox(1.0, 2.0, 2, 1, 0.3)], id="s")
        flipped = flip_scene(scene, horizontal=True)
        assert flipped.image[0, 2, 6] == 1.0
        assert flipped.boxes[0].cx == 6.0 and flipped.boxes[0].theta == -0.3

    def test_double_flip_is_identity(self, tiny_scenes):
        scene = tiny_scenes[0]
        back = flip_scene(flip_scene(scene, horizontal=False), horizontal=False)
        np.testing.assert_array_equal(back.image, scene.image)
        for a, b in zip(back.boxes, scene.boxes):
            assert a.as_tuple() == pytest.approx(b.as_tuple())

    def test_augment_never_flips_at_zero_probability(self, tiny_scenes, rng):
        assert augment(tiny_scenes[0], rng, p=0.0) is tiny_scenes[0]


# ---------------------------------------------------------------------------
# Annotation tests
# ---------------------------------------------------------------------------

class TestAnnotations:
    def test_parse(self):
        text = "# header\n\nimg_1 10.5 4 6 3 0.25 ship\nimg_1 20 20 4 2 -1.0 vehicle  # note\n"
        entries = parse_annotation_text(text)
        assert [e[0] for e in entries] == ["img_1", "img_1"]
        assert entries[0][1].as_tuple() == (10.5, 4.0, 6.0, 3.0, 0.25)
        assert entries[1][1].class_id == 1

    def test_round_trip_is_exact(self, rng):
        boxes = [RotatedBox(*rng.uniform(0, 60, 2), *rng.uniform(1, 9, 2), rng.uniform(-1.5, 1.5))
                 for _ in range(5)]
        entries = parse_annotation_text(format_annotations([("s", b) for b in boxes]))
        assert [b for _, b in entries] == boxes

    def test_field_count_error_names_line(self):
        with pytest.raises(DataError, match=":2:"):
            parse_annotation_text("a 1 2 3 4 0 ship\na 1 2 3\n")

    def test_unknown_class(self):
        with pytest.raises(DataError, match="unknown class"):
            parse_annotation_text("a 1 2 3 4 0 tank\n")

    def test_non_positive_extent(self):
        with pytest.raises(DataError):
            parse_annotation_text("a 1 2 0 4 0 ship\n")

    def test_non_numeric(self):
        with pytest.raises(DataError):
            parse_annotation_text("a 1 two 3 4 0 ship\n")


# ---------------------------------------------------------------------------
# PGM tests
# ---------------------------------------------------------------------------

class TestPGM:
    def test_encode_rounds_half_up(self):
        blob = encode_pgm(np.array([[0.0, 1.0, 0.5, 2.0]]))
        assert blob == b"P5\n4 1\n255\n" + bytes([0, 255, 128, 255])

    def test_decode_with_comment(self):
        image = decode_pgm(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(image, [[[0.0, 1.0]]])

    def test_file_round_trip_quantized(self, tmp_path, rng):
        image = rng.uniform(size=(1, 5, 7))
        write_pgm(tmp_path / "x.pgm", image)
        back = read_pgm(tmp_path / "x.pgm")
        assert back.shape == (1, 5, 7)
        assert np.abs(back - image).max() <= 0.5 / 255 + 1e-12

    @pytest.mark.parametrize("blob", [
        b"P2\n1 1\n255\n0",
        b"P5\n2 2\n65535\n" + bytes(8),
        b"P5\n4 4\n255\n" + bytes(3),
        b"P5\n4",
    ])
    def test_bad_images(self, blob):
        with pytest.raises(DataError):
            decode_pgm(blob)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_pgm(tmp_path / "nope.pgm")


# ---------------------------------------------------------------------------
# Dataset tests
# ---------------------------------------------------------------------------

class TestDataset:
    def test_split_parity(self):
        assert split_ids(list("abcdef")) == {"train": ["a", "c", "e"], "val": ["b", "d", "f"]}

    def test_split_stride(self):
        assert split_ids(list("abcdef"), 3)["val"] == ["c", "f"]

    def test_split_file(self, tmp_path):
        path = tmp_path / "split.json"
        path.write_text(json.dumps({"train": ["a"], "val": ["b"]}))
        assert load_split_file(path) == {"train": ["a"], "val": ["b"]}
        path.write_text(json.dumps({"train": ["a"]}))
        with pytest.raises(DataError):
            load_split_file(path)

    def test_write_and_load(self, tmp_path, tiny_synth):
        manifest = write_dataset(tiny_synth, 4, tmp_path)
        assert len(list((tmp_path / "images").glob("*.pgm"))) == 4
        assert len(list((tmp_path / "annotations").glob("*.txt"))) == 4
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.ids() == manifest.ids()
        assert loaded.split == {"train": ["scene_00000", "scene_00002"],
                                "val": ["scene_00001", "scene_00003"]}
        scenes = load_scenes(loaded, "val")
        original = synth_scene(tiny_synth, 1)
        assert scenes[0].boxes == original.boxes
        assert np.abs(scenes[0].image - original.image).max() <= 0.5 / 255 + 1e-12

    def test_rewrite_is_byte_identical(self, tmp_path, tiny_synth):
        write_dataset(tiny_synth, 2, tmp_path / "a")
        write_dataset(tiny_synth, 2, tmp_path / "b")
        for rel in ("images/scene_00001.pgm", "annotations/scene_00001.txt", "manifest.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_empty_dataset(self, tmp_path, tiny_synth):
        write_dataset(tiny_synth, 0, tmp_path)
        data = json.loads((tmp_path / "manifest.json").read_text())
        assert data["images"] == []

    def test_manifest_unknown_split_id(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"images": [], "split": {"train": ["ghost"], "val": []}}))
        with pytest.raises(DataError):
            load_manifest(path)

    def test_manifest_missing_split(self, tmp_path, tiny_synth):
        manifest = write_dataset(tiny_synth, 2, tmp_path)
        with pytest.raises(DataError):
            manifest.ids("test")

    def test_class_names_resolve(self, tmp_path):
        (tmp_path / "a.txt").write_text("img 4 4 3 2 0 vehicle\n")
        write_pgm(tmp_path / "a.pgm", np.zeros((8, 8)))
        (tmp_path / "m.json").write_text(json.dumps({
            "images": [{"id": "img", "image_path": "a.pgm", "annotation_path": "a.txt"}],
        }))
        scenes = load_scenes(load_manifest(tmp_path / "m.json"), "all")
        assert scenes[0].boxes[0].class_id == 1
        assert math.isclose(scenes[0].boxes[0].w, 3.0)
