import unittest
import sys
import os

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from config import Config
from scene_synth import (MIN_VISIBLE_PIXELS, SceneConfig, SplitMix64, SpriteKind, VideoConfig, config_from,
                         coverage, gen_image, gen_video, generate_split, split_seeds)


class TestSplitMix64(unittest.TestCase):
    """Test cases for the deterministic random stream"""

    def test_reference_outputs(self):
        rng = SplitMix64(0)
        self.assertEqual(rng.next_u64(), 0xE220A8397B1DCDAF)
        self.assertEqual(rng.next_u64(), 0x6E789E6AA1B965F4)

    def test_randint_is_inclusive(self):
        rng = SplitMix64(42)
        values = {rng.randint(2, 4) for _ in range(200)}
        self.assertEqual(values, {2, 3, 4})
        with self.assertRaises(ValueError):
            rng.randint(3, 2)


class TestSceneGeneration(unittest.TestCase):
    """Test cases for image and clip generation"""

    def setUp(self):
        self.cfg = VideoConfig(height=32, width=32, min_objects=1, max_objects=4, length=4, speed_max=0.1)

    def test_same_seed_same_scene(self):
        a = gen_image(7, self.cfg)
        b = gen_image(7, self.cfg)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        self.assertEqual(a.sprites, b.sprites)

    def test_masks_and_visibility(self):
        """Every sprite owns at least the minimum number of visible pixels"""
        for seed in range(10):
            sample = gen_image(seed, self.cfg)
            self.assertEqual(sample.image.shape, (32, 32, 3))
            self.assertEqual(sample.image.dtype, np.float32)
            self.assertTrue(np.all((sample.image >= 0) & (sample.image <= 1)))
            counts = np.bincount(sample.mask.ravel(), minlength=len(sample.sprites) + 1)
            self.assertEqual(len(counts), len(sample.sprites) + 1)
            self.assertTrue(np.all(counts[1:] >= MIN_VISIBLE_PIXELS))
            self.assertEqual([s.instance_id for s in sample.sprites], list(range(1, len(sample.sprites) + 1)))

    def test_empty_scene(self):
        cfg = SceneConfig(min_objects=0, max_objects=0)
        sample = gen_image(3, cfg)
        self.assertEqual(sample.sprites, [])
        self.assertFalse(np.any(sample.mask))
        np.testing.assert_allclose(sample.image, 128 / 255.0)

    def test_first_frame_matches_image(self):
        """Frame 0 of a clip is the still image for the same seed"""
        for seed in (1, 2, 3):
            clip = gen_video(seed, self.cfg)
            still = gen_image(seed, self.cfg)
            np.testing.assert_array_equal(clip.frames[0], still.image)
            np.testing.assert_array_equal(clip.masks[0], still.mask)
            self.assertEqual(clip.frames.shape, (4, 32, 32, 3))
            self.assertEqual(clip.tracks.shape, (len(clip.sprites), 4, 2))

    def test_zero_speed_is_static(self):
        cfg = VideoConfig(length=3, speed_min=0.0, speed_max=0.0)
        clip = gen_video(11, cfg)
        for t in range(1, 3):
            np.testing.assert_array_equal(clip.frames[t], clip.frames[0])
            np.testing.assert_array_equal(clip.tracks[:, t], clip.tracks[:, 0])

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            gen_image(0, SceneConfig(height=8))
        with self.assertRaises(ValueError):
            gen_image(0, SceneConfig(min_objects=3, max_objects=2))
        with self.assertRaises(ValueError):
            gen_image(0, SceneConfig(background='noise'))

    def test_square_coverage_area(self):
        """An axis-aligned square covering half the canvas width covers 16x16 pixel centers"""
        size = 32
        sub = 16
        center = size * sub
        half = size * sub // 2
        covered = coverage(SpriteKind.SQUARE, center, center, half, half, size, size)
        self.assertEqual(int(covered.sum()), 16 * 16)

    def test_parallel_generation_matches_serial(self):
        seeds = split_seeds(5, 'train', 6)
        serial = generate_split(seeds, self.cfg, workers=1)
        parallel = generate_split(seeds, self.cfg, workers=3)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.image, b.image)

    def test_split_seeds_are_disjoint(self):
        train = set(split_seeds(0, 'train', 100))
        val = set(split_seeds(0, 'val', 100))
        self.assertFalse(train & val)

    def test_config_from_global_config(self):
        config = Config({'data.clip_length': 3, 'data.max_objects': 2, 'data.background': 'gradient'})
        cfg = config_from(config)
        self.assertEqual(cfg.length, 3)
        self.assertEqual(cfg.max_objects, 2)
        self.assertEqual(cfg.background, 'gradient')


if __name__ == '__main__':
    unittest.main()
