import json

import numpy as np
import pytest

from tsdet.geometry import Box
from tsdet.synth import (CLASS_NAMES, DatasetError, Scene, SceneConfig,
                         UnlabeledScene, generate_scene, make_splits,
                         read_coco_json, write_coco_json)


class TestGenerateScene:
    def test_bit_identical_under_same_seed(self):
        a = generate_scene(0)
        b = generate_scene(0)
        assert np.array_equal(a.image, b.image)
        assert a.annotations == b.annotations

    def test_different_seed_differs(self):
        a = generate_scene(1)
        b = generate_scene(2)
        assert not np.array_equal(a.image, b.image)

    def test_degenerate_weights_pin_class(self):
        cfg = SceneConfig(class_weights=(1, 0, 0, 0, 0, 0, 0))
        for seed in range(5):
            s = generate_scene(seed, cfg)
            assert all(c == 0 for _, c in s.annotations)

    def test_invalid_weights_rejected(self):
        with pytest.raises(DatasetError, match="positive"):
            generate_scene(0, SceneConfig(class_weights=(0,) * 7))
        with pytest.raises(DatasetError):
            generate_scene(0, SceneConfig(class_weights=(1, 1)))

    def test_boxes_within_bounds_and_counts(self):
        cfg = SceneConfig()
        for seed in range(30):
            s = generate_scene(seed, cfg)
            assert 1 <= len(s.annotations) <= cfg.max_instances
            for box, c in s.annotations:
                assert 0 <= box.x1 < box.x2 <= cfg.image_size
                assert 0 <= box.y1 < box.y2 <= cfg.image_size
                assert 0 <= c < cfg.num_classes

    def test_image_range_and_dtype(self):
        s = generate_scene(7)
        assert s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_long_tail_frequencies_within_two_percent(self):
        cfg = SceneConfig()
        counts = np.zeros(cfg.num_classes)
        seed = 0
        while counts.sum() < 10000:
            s = generate_scene(50000 + seed, cfg)
            for _, c in s.annotations:
                counts[c] += 1
            seed += 1
        freq = counts / counts.sum()
        weights = np.asarray(cfg.class_weights) / sum(cfg.class_weights)
        assert np.abs(freq - weights).max() < 0.02


class TestMakeSplits:
    def test_split_sizes(self):
        sp = make_splits(1000, 0.10, seed=7)
        assert len(sp.labeled) == 80
        assert len(sp.unlabeled) == 720
        assert len(sp.val) == 100
        assert len(sp.test) == 100

    def test_one_percent(self):
        sp = make_splits(1000, 0.01, seed=7)
        assert len(sp.labeled) == 8

    def test_deterministic_ids(self):
        a = make_splits(200, 0.1, seed=5)
        b = make_splits(200, 0.1, seed=5)
        assert [s.id for s in a.labeled] == [s.id for s in b.labeled]
        assert [s.id for s in a.unlabeled] == [s.id for s in b.unlabeled]
        assert np.array_equal(a.labeled[0].image, b.labeled[0].image)

    def test_partitions_disjoint_and_exhaustive(self):
        sp = make_splits(300, 0.05, seed=1)
        ids = [s.id for part in (sp.labeled, sp.unlabeled, sp.val, sp.test) for s in part]
        assert len(ids) == 300
        assert len(set(ids)) == 300

    def test_full_fraction_empties_unlabeled(self):
        sp = make_splits(150, 1.0, seed=0)
        assert sp.unlabeled == []
        assert len(sp.labeled) == 150 - 2 * 15

    def test_zero_labeled_instructs_larger_n(self):
        with pytest.raises(DatasetError, match="larger n_scenes"):
            make_splits(100, 0.001, seed=0)

    def test_too_few_scenes_rejected(self):
        with pytest.raises(DatasetError, match="at least 100"):
            make_splits(50, 0.5, seed=0)

    def test_unlabeled_surface_has_no_annotations(self):
        sp = make_splits(120, 0.1, seed=2)
        u = sp.unlabeled[0]
        assert isinstance(u, UnlabeledScene)
        assert not hasattr(u, "annotations")
        # withheld ground truth is reachable only through the diagnostics accessor
        assert sp.hidden_annotations(u.id)


class TestCocoJson:
    def test_round_trip_boxes_exact(self, tmp_path):
        scenes = [generate_scene(i) for i in range(10)]
        for i, s in enumerate(scenes):
            s.id = i
        path = tmp_path / "train.json"
        write_coco_json(scenes, path, image_dir=tmp_path / "img")
        back = read_coco_json(path, tmp_path / "img")
        assert len(back) == len(scenes)
        for a, b in zip(scenes, back):
            assert a.annotations == b.annotations

    def test_bbox_convention(self, tmp_path):
        s = Scene(image=np.zeros((96, 96, 3), dtype=np.float32),
                  annotations=[(Box(10, 20, 40, 60), 2)], id=0)
        path = tmp_path / "one.json"
        write_coco_json([s], path, image_dir=tmp_path / "img")
        doc = json.loads(path.read_text())
        assert doc["annotations"][0]["bbox"] == [10.0, 20.0, 30.0, 40.0]
        back = read_coco_json(path, tmp_path / "img")
        assert back[0].annotations == [(Box(10, 20, 40, 60), 2)]

    def test_missing_image_id_rejected(self, tmp_path):
        s = generate_scene(0)
        s.id = 0
        path = tmp_path / "bad.json"
        write_coco_json([s], path, image_dir=tmp_path / "img")
        doc = json.loads(path.read_text())
        doc["annotations"][0]["image_id"] = 999
        path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="999"):
            read_coco_json(path, tmp_path / "img")

    def test_unknown_category_rejected(self, tmp_path):
        s = generate_scene(0)
        s.id = 0
        path = tmp_path / "bad.json"
        write_coco_json([s], path, image_dir=tmp_path / "img")
        doc = json.loads(path.read_text())
        doc["annotations"][0]["category_id"] = 42
        path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="unknown category"):
            read_coco_json(path, tmp_path / "img")

    def test_out_of_bounds_bbox_rejected(self, tmp_path):
        s = generate_scene(0)
        s.id = 0
        path = tmp_path / "bad.json"
        write_coco_json([s], path, image_dir=tmp_path / "img")
        doc = json.loads(path.read_text())
        doc["annotations"][0]["bbox"] = [90.0, 90.0, 20.0, 20.0]
        path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="bounds"):
            read_coco_json(path, tmp_path / "img")

    def test_malformed_json_reports_offset(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"images": [')
        with pytest.raises(DatasetError, match="offset"):
            read_coco_json(path, tmp_path)

    def test_missing_top_key_rejected(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text('{"images": [], "annotations": []}')
        with pytest.raises(DatasetError, match="categories"):
            read_coco_json(path, tmp_path)

    def test_withheld_annotations(self, tmp_path):
        scenes = [generate_scene(i) for i in range(3)]
        for i, s in enumerate(scenes):
            s.id = i
        path = tmp_path / "unlabeled.json"
        write_coco_json(scenes, path, image_dir=tmp_path / "img", withhold_annotations=True)
        back = read_coco_json(path, tmp_path / "img")
        assert all(s.annotations == [] for s in back)

    def test_category_names_recorded(self, tmp_path):
        s = generate_scene(0)
        s.id = 0
        path = tmp_path / "names.json"
        write_coco_json([s], path, image_dir=tmp_path / "img")
        doc = json.loads(path.read_text())
        assert [c["name"] for c in doc["categories"]] == list(CLASS_NAMES)
