import numpy as np
from django.test import SimpleTestCase

from stereo.exceptions import ConfigurationError
from stereo.gradcheck import tiny_model_config
from stereo.model import VARIANTS, LightStereo, ModelConfig, build_model, infer, pad_to_multiple


class ModelConfigTests(SimpleTestCase):
    def test_variant_table(self):
        self.assertEqual(ModelConfig.for_variant('s').aggregation.blocks, (1, 2, 4))
        self.assertEqual(ModelConfig.for_variant('M').aggregation.blocks, (4, 8, 14))
        config = ModelConfig.for_variant('L')
        self.assertEqual(config.aggregation.expansion, (8, 8, 8))
        self.assertEqual(config.aggregation.channels, (48, 96, 192))

    def test_unknown_variant(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig.for_variant('XL')

    def test_named_variant_must_match_its_table_row(self):
        config = ModelConfig.for_variant('S')
        with self.assertRaises(ConfigurationError):
            ModelConfig(variant='S', aggregation=ModelConfig.for_variant('M').aggregation).validate()
        self.assertEqual(config.without_msca().variant, 'custom')
        self.assertFalse(config.without_msca().aggregation.use_msca)

    def test_custom_ablation(self):
        config = ModelConfig.custom((2, 4, 8), (16, 16, 16), max_disparity=64)
        self.assertEqual(config.aggregation.channels, (16, 32, 64))

    def test_bad_max_disparity(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig.for_variant('S', max_disparity=30)


class LightStereoTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model = build_model(tiny_model_config(), seed=0)

    def test_built_in_eval_mode(self):
        self.assertFalse(self.model.training)
        self.assertFalse(self.model.retain)

    def test_output_shape_and_range(self):
        rng = np.random.default_rng(0)
        left = rng.standard_normal((2, 3, 32, 64)).astype(np.float32)
        right = rng.standard_normal((2, 3, 32, 64)).astype(np.float32)
        disparity = self.model(left, right)
        self.assertEqual(disparity.shape, (2, 32, 64))
        self.assertTrue(np.isfinite(disparity.values).all())
        self.assertGreaterEqual(disparity.values.min(), 0)
        self.assertLessEqual(disparity.values.max(), 16 - 4)

    def test_toy_variant_runs_on_toy_crops(self):
        model = build_model(ModelConfig.for_variant('S', max_disparity=32), seed=1)
        left = np.random.default_rng(1).random((64, 96, 3)).astype(np.float32)
        disparity = infer(model, left, left[:, ::-1].copy())
        self.assertEqual(disparity.shape, (64, 96))

    def test_infer_is_deterministic(self):
        image = np.random.default_rng(2).random((32, 64, 3)).astype(np.float32)
        first = infer(self.model, image, image)
        second = infer(self.model, image, image)
        np.testing.assert_array_equal(first.values, second.values)

    def test_infer_rejects_size_mismatch(self):
        with self.assertRaisesMessage(ConfigurationError, '(32, 96)'):
            infer(self.model, np.zeros((32, 64, 3)), np.zeros((32, 96, 3)))

    def test_infer_needs_eval_mode(self):
        model = LightStereo(tiny_model_config(), np.random.default_rng(0)).train()
        with self.assertRaises(ConfigurationError):
            infer(model, np.zeros((32, 64, 3)), np.zeros((32, 64, 3)))

    def test_same_seed_same_weights(self):
        other = build_model(tiny_model_config(), seed=0)
        for (name, a), (_, b) in zip(self.model.state_dict().items(), other.state_dict().items()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_variant_sizes_are_ordered(self):
        counts = [LightStereo(ModelConfig.for_variant(v), np.random.default_rng(0)).num_parameters() for v in 'SML']
        self.assertLess(counts[0], counts[1])
        self.assertLess(counts[1], counts[2])
        self.assertEqual(sorted(VARIANTS), ['L', 'M', 'S'])


class PaddingTests(SimpleTestCase):
    def test_pads_bottom_right_by_reflection(self):
        image = np.arange(40 * 70 * 3, dtype=np.float32).reshape(40, 70, 3)
        padded, (h, w) = pad_to_multiple(image)
        self.assertEqual(padded.shape, (64, 96, 3))
        self.assertEqual((h, w), (40, 70))
        np.testing.assert_array_equal(padded[:40, :70], image)
        np.testing.assert_array_equal(padded[40], image[38])

    def test_aligned_image_is_untouched(self):
        image = np.zeros((32, 64, 3))
        self.assertIs(pad_to_multiple(image)[0], image)

    def test_tiny_image_falls_back_to_symmetric(self):
        padded, _ = pad_to_multiple(np.ones((5, 5, 3)))
        self.assertEqual(padded.shape, (32, 32, 3))
