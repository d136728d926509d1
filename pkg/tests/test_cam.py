import tempfile
import unittest
from pathlib import Path

import numpy as np
import numpy.testing as npt
import torch

from epsam.cam import (
    AdlClassifier,
    AdlConfig,
    CamExtractor,
    ClassifierHyper,
    ClassifierWeights,
    _architecture,
    adl_forward,
    drop_mask,
    extract_cam,
    extract_evp,
    importance_map,
    normalize_map,
    train_classifier,
)
from epsam.errors import ConfigurationError, ShapeError
from epsam.syndata import POSITIVE, DatasetParams, GeneratorParams, build_dataset, generate_patch


def _weights(in_channels: int = 4, seed: int = 0, strides=(2, 2, 1, 1)) -> ClassifierWeights:
    torch.manual_seed(seed)
    model = AdlClassifier(in_channels, strides=strides, seed=seed)
    return ClassifierWeights(
        state_dict={k: v.clone() for k, v in model.state_dict().items()},
        architecture=_architecture(in_channels, AdlConfig(), strides),
        hyper={"freq_cut_ratio": 0.25},
        seed=seed,
    )


class TestEvp(unittest.TestCase):

    def test_constant_patch_gives_zero_map(self):
        evp = extract_evp(np.full((16, 16, 3), 0.4))
        npt.assert_array_equal(evp, np.zeros((16, 16)))

    def test_range_and_shape(self):
        rng = np.random.default_rng(0)
        evp = extract_evp(rng.random((32, 32, 3)))
        self.assertEqual(evp.shape, (32, 32))
        self.assertAlmostEqual(float(evp.min()), 0.0)
        self.assertAlmostEqual(float(evp.max()), 1.0)

    def test_rotation_equivariant(self):
        rng = np.random.default_rng(1)
        pixels = rng.random((32, 32, 3))
        npt.assert_allclose(extract_evp(np.rot90(pixels, 1, axes=(0, 1))), np.rot90(extract_evp(pixels), 1), atol=1e-9)

    def test_checkerboard_is_high_frequency(self):
        yy, xx = np.mgrid[0:16, 0:16]
        board = ((yy + xx) % 2).astype(np.float64)
        evp = extract_evp(np.repeat(board[..., None], 3, axis=2))
        npt.assert_allclose(evp, np.zeros_like(evp) + evp.mean(), atol=1e-9)

    def test_centre_impulse_matches_closed_form(self):
        n = 16
        pixels = np.zeros((n, n, 3))
        pixels[n // 2, n // 2, :] = 1.0
        evp = extract_evp(pixels, freq_cut_ratio=0.25)
        # cut side 4 keeps frequencies -1, 0 and 1 on each axis in the low-pass part
        offsets = np.arange(n) - n // 2
        kernel = 1.0 + 2.0 * np.cos(2 * np.pi * offsets / n)
        low_pass = np.outer(kernel, kernel) / n ** 2
        impulse = np.zeros((n, n))
        impulse[n // 2, n // 2] = 1.0
        npt.assert_allclose(evp, normalize_map(np.abs(impulse - low_pass)), atol=1e-9)
        self.assertEqual(np.unravel_index(np.argmax(evp), evp.shape), (n // 2, n // 2))
        self.assertAlmostEqual(float(evp.max()), 1.0)

    def test_non_square_is_rejected(self):
        with self.assertRaises(ShapeError):
            extract_evp(np.zeros((16, 12, 3)))

    def test_cut_ratio_range(self):
        with self.assertRaises(ConfigurationError):
            extract_evp(np.zeros((16, 16, 3)), freq_cut_ratio=1.5)

    def test_normalize_map(self):
        npt.assert_allclose(normalize_map(np.array([[2.0, 4.0], [3.0, 6.0]])), [[0.0, 0.5], [0.25, 1.0]])
        npt.assert_array_equal(normalize_map(np.full((3, 3), 7.0)), np.zeros((3, 3)))


class TestAdl(unittest.TestCase):

    def test_drop_mask_zeroes_peak(self):
        attention = torch.tensor([[[[0.1, 0.5], [0.95, 1.0]]]])
        mask = drop_mask(attention, 0.9)
        npt.assert_array_equal(mask.numpy(), [[[[1.0, 1.0], [0.0, 0.0]]]])

    def test_drop_mask_worked_example(self):
        attention = torch.tensor([[1.0, 5.0], [2.0, 0.0]])
        npt.assert_array_equal(drop_mask(attention, 0.9).numpy(), [[1.0, 0.0], [1.0, 1.0]])

    def test_drop_mask_on_random_maps(self):
        generator = torch.Generator().manual_seed(0)
        for ratio in (0.1, 0.5, 0.9):
            attention = torch.rand(3, 1, 6, 6, generator=generator)
            peak = attention.amax(dim=(-2, -1), keepdim=True)
            mask = drop_mask(attention, ratio)
            self.assertTrue(torch.equal(mask, (attention <= ratio * peak).float()))
            self.assertTrue(bool((mask.amin(dim=(-2, -1)) == 0).all()))

    def test_importance_map_is_sigmoid(self):
        attention = torch.zeros(1, 1, 2, 2)
        npt.assert_allclose(importance_map(attention).numpy(), np.full((1, 1, 2, 2), 0.5))

    def test_identity_at_inference(self):
        features = torch.randn(2, 8, 4, 4)
        out = adl_forward(features, AdlConfig(), torch.Generator().manual_seed(0), training=False)
        self.assertTrue(torch.equal(out, features))

    def test_drop_rate_one_always_drops(self):
        features = torch.rand(1, 4, 4, 4) + 0.1
        cfg = AdlConfig(drop_rate=1.0)
        out = adl_forward(features, cfg, torch.Generator().manual_seed(0), training=True)
        expected = features * drop_mask(features.mean(dim=1, keepdim=True), cfg.drop_threshold_ratio)
        self.assertTrue(torch.equal(out, expected))

    def test_drop_rate_zero_uses_importance(self):
        features = torch.rand(1, 4, 4, 4)
        out = adl_forward(features, AdlConfig(drop_rate=0.0), torch.Generator().manual_seed(0), training=True)
        npt.assert_allclose(out.numpy(), (features * torch.sigmoid(features.mean(dim=1, keepdim=True))).numpy())

    def test_importance_branch_gradient_check(self):
        features = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        cfg = AdlConfig(drop_rate=0.0)

        def fn(x):
            return adl_forward(x, cfg, torch.Generator().manual_seed(0), training=True)

        self.assertTrue(torch.autograd.gradcheck(fn, (features,), eps=1e-6, atol=1e-5))

    def test_classifier_loss_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        model = AdlClassifier(4, widths=(4, 4, 4, 4), adl=AdlConfig(drop_rate=0.0)).double().train()
        x = torch.rand(2, 4, 16, 16, dtype=torch.float64)
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss_fn = torch.nn.BCEWithLogitsLoss()
        params = [p for p in model.parameters() if p.requires_grad]
        loss_fn(model(x), y).backward()

        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(10):
            param = params[rng.integers(len(params))]
            index = tuple(int(rng.integers(s)) for s in param.shape)
            analytic = float(param.grad[index])
            with torch.no_grad():
                original = float(param[index])
                param[index] = original + h
                plus = float(loss_fn(model(x), y))
                param[index] = original - h
                minus = float(loss_fn(model(x), y))
                param[index] = original
            numeric = (plus - minus) / (2 * h)
            self.assertLessEqual(abs(numeric - analytic), 1e-3 * max(abs(numeric), abs(analytic)) + 1e-8)

    def test_invalid_threshold_ratio(self):
        with self.assertRaises(ConfigurationError):
            AdlConfig(drop_threshold_ratio=1.0).validate()


class TestCamExtraction(unittest.TestCase):

    def setUp(self):
        self.patch, _ = generate_patch(0, GeneratorParams(size=32), POSITIVE, patch_id="p0")

    def test_cam_shape_and_range(self):
        cam = extract_cam(_weights(), self.patch, extract_evp(self.patch.pixels))
        self.assertEqual(cam.values.shape, (32, 32))
        self.assertGreaterEqual(cam.values.min(), 0.0)
        self.assertLessEqual(cam.values.max(), 1.0)
        self.assertEqual(cam.patch_id, "p0")

    def test_channel_mismatch_is_rejected(self):
        with self.assertRaises(ShapeError):
            extract_cam(_weights(in_channels=4), self.patch, None)

    def test_plain_adl_weights_without_evp(self):
        cam = extract_cam(_weights(in_channels=3), self.patch, None)
        self.assertEqual(cam.values.shape, (32, 32))

    def test_all_stride_two_backbone(self):
        weights = _weights(strides=(2, 2, 2, 2))
        x = torch.zeros(1, 4, 32, 32)
        self.assertEqual(tuple(weights.build().eval().class_evidence(x).shape), (1, 2, 2))
        cam = extract_cam(weights, self.patch, extract_evp(self.patch.pixels))
        self.assertEqual(cam.values.shape, (32, 32))
        self.assertEqual(tuple(_weights().build().eval().class_evidence(x).shape), (1, 8, 8))

    def test_strides_are_validated(self):
        ClassifierHyper(strides=(2, 2, 2, 2)).validate()
        with self.assertRaises(ConfigurationError):
            ClassifierHyper(strides=(2, 2, 3, 1)).validate()
        with self.assertRaises(ConfigurationError):
            ClassifierHyper(strides=(2, 2)).validate()

    def test_head_scale_leaves_cam_unchanged(self):
        weights = _weights()
        scaled = ClassifierWeights(
            state_dict={k: (v * 3.0 if k == "head.weight" else v) for k, v in weights.state_dict.items()},
            architecture=weights.architecture,
            hyper=weights.hyper,
        )
        evp = extract_evp(self.patch.pixels)
        npt.assert_allclose(
            extract_cam(weights, self.patch, evp).values, extract_cam(scaled, self.patch, evp).values, atol=1e-6
        )

    def test_extractor_is_callable_on_pixels(self):
        extractor = CamExtractor(_weights())
        npt.assert_allclose(
            extractor(self.patch.pixels), extract_cam(extractor, self.patch, extract_evp(self.patch.pixels)).values
        )
        self.assertTrue(0.0 <= extractor.probability(self.patch.pixels) <= 1.0)

    def test_weights_round_trip(self):
        weights = _weights()
        with tempfile.TemporaryDirectory() as tmp:
            path = weights.save(Path(tmp) / "classifier.ckpt")
            loaded = ClassifierWeights.load(path)
        for name, tensor in weights.state_dict.items():
            self.assertTrue(torch.equal(tensor, loaded.state_dict[name]))
        self.assertEqual(loaded.architecture, weights.architecture)


class TestTrainClassifier(unittest.TestCase):

    def test_training_is_seeded(self):
        params = DatasetParams(train=8, valid=4, test=4, slides=6, generator=GeneratorParams(size=32))
        hyper = ClassifierHyper(epochs=2, batch_size=4)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = build_dataset(params, seed=0, out_dir=tmp)
            a = train_classifier(manifest, AdlConfig(), hyper, seed=3)
            b = train_classifier(manifest, AdlConfig(), hyper, seed=3)
        self.assertIn(a.best_epoch, (1, 2))
        self.assertEqual(a.in_channels, 4)
        for name, tensor in a.state_dict.items():
            self.assertTrue(torch.equal(tensor, b.state_dict[name]), name)


if __name__ == "__main__":
    unittest.main()
