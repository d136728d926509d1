import tempfile
import unittest
from pathlib import Path

import numpy as np
import numpy.testing as npt

from epsam.errors import ConfigurationError, DomainError, SamplingError
from epsam.pepm import (
    PepmConfig,
    PointPromptSet,
    entropy_map,
    load_prompts,
    make_prompts,
    patch_rng,
    sample_points,
    save_prompts,
    uniform_points,
)


class TestEntropyMap(unittest.TestCase):

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        entropy = entropy_map(rng.random((8, 8)))
        self.assertAlmostEqual(float(entropy.values.sum()), 1.0, places=12)
        self.assertFalse(entropy.degenerate)

    def test_normalises_by_total(self):
        npt.assert_allclose(entropy_map(np.array([[1.0, 3.0], [0.0, 0.0]])).values, [[0.25, 0.75], [0.0, 0.0]])

    def test_positive_scaling_leaves_map_unchanged(self):
        rng = np.random.default_rng(2)
        activation = rng.random((8, 8))
        for c in (1e-3, 0.5, 7.0, 1e4):
            npt.assert_allclose(entropy_map(c * activation).values, entropy_map(activation).values, rtol=1e-12)

    def test_zero_activation_is_degenerate(self):
        entropy = entropy_map(np.zeros((4, 4)))
        self.assertTrue(entropy.degenerate)
        npt.assert_array_equal(entropy.values, np.zeros((4, 4)))

    def test_negative_activation_is_rejected(self):
        with self.assertRaises(DomainError):
            entropy_map(np.array([[0.5, -0.1]]))


class TestSamplePoints(unittest.TestCase):

    def test_points_are_distinct_and_on_support(self):
        cam = np.zeros((10, 10))
        cam[2:6, 3:8] = np.random.default_rng(1).random((4, 5)) + 0.1
        prompts = sample_points(entropy_map(cam), 12, np.random.default_rng(2))
        self.assertEqual(prompts.count, 12)
        coords = prompts.coordinates()
        self.assertEqual(len(set(coords)), 12)
        for r, c in coords:
            self.assertGreater(cam[r, c], 0)
        self.assertTrue(all(label == "foreground" for _, _, label in prompts.points))

    def test_small_support_returns_all_of_it(self):
        cam = np.zeros((5, 5))
        cam[1, 1] = cam[3, 4] = 0.5
        prompts = sample_points(entropy_map(cam), 50, np.random.default_rng(0))
        self.assertEqual(sorted(prompts.coordinates()), [(1, 1), (3, 4)])

    def test_degenerate_map_raises(self):
        with self.assertRaises(SamplingError):
            sample_points(entropy_map(np.zeros((4, 4))), 5, np.random.default_rng(0))

    def test_k_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            sample_points(entropy_map(np.ones((4, 4))), 0, np.random.default_rng(0))

    def test_single_draw_frequencies_follow_entropy(self):
        cam = np.array([[0.1, 0.2], [0.3, 0.4]])
        entropy = entropy_map(cam)
        rng = np.random.default_rng(7)
        counts = np.zeros((2, 2))
        draws = 10000
        for _ in range(draws):
            (r, c), = sample_points(entropy, 1, rng).coordinates()
            counts[r, c] += 1
        npt.assert_allclose(counts / draws, entropy.values, atol=0.02)

    def test_same_seed_same_points(self):
        cam = np.random.default_rng(3).random((16, 16))
        a = sample_points(entropy_map(cam), 20, patch_rng(0, "p"))
        b = sample_points(entropy_map(cam), 20, patch_rng(0, "p"))
        self.assertEqual(a.points, b.points)


class TestStrategies(unittest.TestCase):

    def setUp(self):
        self.cam = np.random.default_rng(4).random((12, 12))
        self.region = np.zeros((12, 12), dtype=np.uint8)
        self.region[4:8, 4:8] = 1

    def test_mask_strategy_stays_inside_initial_mask(self):
        prompts = make_prompts("mask", 10, np.random.default_rng(0), cam=self.cam, initial_mask=self.region, patch_id="a")
        self.assertEqual(prompts.patch_id, "a")
        for r, c in prompts.coordinates():
            self.assertEqual(self.region[r, c], 1)

    def test_gt_strategy_stays_inside_ground_truth(self):
        prompts = make_prompts("gt", 5, np.random.default_rng(0), cam=self.cam, ground_truth=self.region)
        for r, c in prompts.coordinates():
            self.assertEqual(self.region[r, c], 1)

    def test_random_strategy_covers_patch(self):
        prompts = make_prompts("random", 30, np.random.default_rng(0), cam=self.cam)
        self.assertEqual(prompts.count, 30)

    def test_empty_region_raises(self):
        with self.assertRaises(SamplingError):
            uniform_points(np.zeros((4, 4)), 3, np.random.default_rng(0))

    def test_unknown_strategy(self):
        with self.assertRaises(ConfigurationError):
            PepmConfig(strategy="box").validate()


class TestPromptFiles(unittest.TestCase):

    def test_jsonl_round_trip(self):
        prompts = [
            PointPromptSet(points=[(1, 2, "foreground"), (3, 4, "foreground")], patch_id="a"),
            PointPromptSet(points=[(0, 0, "foreground")], patch_id="b"),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "prompts.jsonl"
            save_prompts(path, prompts)
            loaded = load_prompts(path)
        self.assertEqual(loaded["a"], prompts[0])
        self.assertEqual(loaded["b"], prompts[1])


if __name__ == "__main__":
    unittest.main()
