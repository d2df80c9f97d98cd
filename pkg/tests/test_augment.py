import numpy as np
import pytest

from tsdet.augment import (AugmentConfig, apply_recipe, strong_augment, weak_augment)
from tsdet.geometry import Box
from tsdet.synth import generate_scene


def no_op_config(**kw):
    cfg = AugmentConfig(flip_p=0.0, grayscale_p=0.0, jitter_p=0.0, blur_p=0.0, cutout_p=0.0)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TestWeakAugment:
    def test_flip_reflects_boxes(self):
        scene = generate_scene(0)
        out = weak_augment(scene.image, [(Box(10, 0, 20, 10), 3)],
                           np.random.default_rng(0), no_op_config(flip_p=1.0))
        assert out.annotations == [(Box(76, 0, 86, 10), 3)]

    def test_flip_twice_is_identity(self):
        scene = generate_scene(1)
        once = apply_recipe(scene.image, scene.annotations, [{"op": "hflip"}])
        twice = apply_recipe(once.image, once.annotations, [{"op": "hflip"}])
        assert np.array_equal(twice.image, scene.image)
        assert twice.annotations == scene.annotations

    def test_probability_zero_is_identity(self):
        scene = generate_scene(2)
        out = weak_augment(scene.image, scene.annotations,
                           np.random.default_rng(0), no_op_config())
        assert np.array_equal(out.image, scene.image)
        assert out.annotations == scene.annotations
        assert out.recipe == []

    def test_flip_preserves_class_ids(self):
        scene = generate_scene(3)
        out = weak_augment(scene.image, scene.annotations,
                           np.random.default_rng(0), no_op_config(flip_p=1.0))
        assert [c for _, c in out.annotations] == [c for _, c in scene.annotations]


class TestStrongAugment:
    def test_all_probabilities_zero_equals_weak(self):
        scene = generate_scene(4)
        rng_a = np.random.default_rng(9)
        rng_b = np.random.default_rng(9)
        cfg = no_op_config(flip_p=0.5)
        weak = weak_augment(scene.image, scene.annotations, rng_a, cfg)
        strong = strong_augment(scene.image, scene.annotations, rng_b, cfg)
        assert np.array_equal(weak.image, strong.image)
        assert weak.annotations == strong.annotations

    def test_grayscale_idempotent_on_gray(self):
        gray = np.full((32, 32, 3), 0.4, dtype=np.float32)
        out = apply_recipe(gray, [], [{"op": "grayscale"}])
        np.testing.assert_allclose(out.image, gray, atol=1e-6)

    def test_photometric_ops_leave_annotations(self):
        scene = generate_scene(5)
        cfg = AugmentConfig(flip_p=0.0, grayscale_p=1.0, jitter_p=1.0, blur_p=1.0, cutout_p=1.0)
        out = strong_augment(scene.image, scene.annotations, np.random.default_rng(1), cfg)
        assert out.annotations == scene.annotations

    def test_pixels_stay_in_unit_range(self):
        scene = generate_scene(6)
        cfg = AugmentConfig(flip_p=1.0, grayscale_p=0.5, jitter_p=1.0, blur_p=1.0, cutout_p=1.0)
        for seed in range(10):
            out = strong_augment(scene.image, scene.annotations,
                                 np.random.default_rng(seed), cfg)
            assert out.image.min() >= 0.0
            assert out.image.max() <= 1.0

    def test_annotations_stay_valid(self):
        cfg = AugmentConfig()
        for seed in range(20):
            scene = generate_scene(seed)
            out = strong_augment(scene.image, scene.annotations,
                                 np.random.default_rng(seed), cfg)
            w = scene.image.shape[1]
            for box, _ in out.annotations:
                assert 0 <= box.x1 < box.x2 <= w
                assert box.area > 0

    def test_cutout_fill_color_applied(self):
        img = np.zeros((20, 20, 3), dtype=np.float32)
        out = apply_recipe(img, [], [{"op": "cutout", "rects": [[2, 3, 8, 9]],
                                      "fill": [0.25, 0.5, 0.75]}])
        expected = np.broadcast_to(np.array([0.25, 0.5, 0.75], dtype=np.float32), (6, 6, 3))
        np.testing.assert_allclose(out.image[3:9, 2:8], expected)
        assert out.image[0, 0, 0] == 0.0


class TestRecipes:
    def test_reapplication_bit_identical(self):
        scene = generate_scene(7)
        cfg = AugmentConfig()
        for seed in range(8):
            out = strong_augment(scene.image, scene.annotations,
                                 np.random.default_rng(seed), cfg)
            again = apply_recipe(scene.image, scene.annotations, out.recipe)
            assert np.array_equal(out.image, again.image)
            assert out.annotations == again.annotations

    def test_recipe_is_json_serializable(self):
        import json
        scene = generate_scene(8)
        out = strong_augment(scene.image, scene.annotations,
                             np.random.default_rng(3), AugmentConfig())
        rebuilt = json.loads(json.dumps(out.recipe))
        again = apply_recipe(scene.image, scene.annotations, rebuilt)
        assert np.array_equal(out.image, again.image)

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown augmentation"):
            apply_recipe(np.zeros((4, 4, 3), dtype=np.float32), [], [{"op": "rotate"}])


class TestConfigValidation:
    def test_probability_range(self):
        cfg = AugmentConfig(flip_p=1.5)
        with pytest.raises(ValueError, match="flip_p"):
            cfg.validate()

    def test_jitter_range(self):
        cfg = AugmentConfig(jitter_lo=2.0, jitter_hi=1.0)
        with pytest.raises(ValueError, match="jitter"):
            cfg.validate()
