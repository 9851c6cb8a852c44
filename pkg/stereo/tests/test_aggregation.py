import numpy as np
from django.test import SimpleTestCase

from stereo.aggregation import (
    AggregationConfig, CostAggregator, Msca, aggregate, build_aggregator, inverted_residual, msca,
)
from stereo.backbone import FeaturePyramid
from stereo.exceptions import ConfigurationError
from stereo.layers import Conv2d, InvertedResidual
from stereo.model import VARIANTS
from stereo import tensor_ops as ops


def pyramid(rng, n, channels, h, w):
    return FeaturePyramid(
        f4=rng.standard_normal((n, channels[0], h, w)).astype(np.float32),
        f8=rng.standard_normal((n, channels[1], (h + 1) // 2, (w + 1) // 2)).astype(np.float32),
        f16=rng.standard_normal((n, channels[2], (h + 3) // 4, (w + 3) // 4)).astype(np.float32),
    )


class MscaTests(SimpleTestCase):
    def test_output_shape_follows_cost(self):
        rng = np.random.default_rng(0)
        attention = Msca(6, 12, rng)
        out = msca(rng.standard_normal((2, 6, 5, 7)), rng.standard_normal((2, 12, 5, 7)), attention)
        self.assertEqual(out.shape, (2, 12, 5, 7))

    def test_zero_mixer_annihilates(self):
        rng = np.random.default_rng(1)
        attention = Msca(4, 8, rng)
        attention.mixer._params['weight'][...] = 0
        out = attention(rng.standard_normal((1, 4, 6, 6)), rng.standard_normal((1, 8, 6, 6)))
        self.assertFalse(out.any())

    def test_misaligned_inputs(self):
        attention = Msca(4, 8, np.random.default_rng(2))
        with self.assertRaises(ConfigurationError):
            attention(np.zeros((1, 4, 6, 6)), np.zeros((1, 8, 6, 5)))

    def test_strip_pair_equals_outer_product_kernel(self):
        rng = np.random.default_rng(3)
        c = 3
        vertical = Conv2d(c, c, (7, 1), rng, groups=c)
        horizontal = Conv2d(c, c, (1, 7), rng, groups=c)
        x = rng.standard_normal((1, c, 9, 11))
        pair = horizontal(vertical(x))
        kernel = vertical._params['weight'][:, 0, :, 0, None] * horizontal._params['weight'][:, 0, 0, None, :]
        full = ops.conv2d(x, ops.ConvParams(kernel[:, None].astype(np.float64), padding=(3, 3), groups=c))
        np.testing.assert_allclose(pair, full, rtol=1e-5, atol=1e-6)


class AggregatorTests(SimpleTestCase):
    def test_config_for_disparity(self):
        config = AggregationConfig.for_disparity(192, *VARIANTS['S'])
        self.assertEqual(config.channels, (48, 96, 192))
        self.assertEqual(config.blocks, (1, 2, 4))
        with self.assertRaises(ConfigurationError):
            config.validate(max_disparity=128)
        with self.assertRaises(ConfigurationError):
            AggregationConfig(blocks=(1, 0, 1)).validate()

    def test_small_s_config_keeps_volume_shape(self):
        rng = np.random.default_rng(0)
        config = AggregationConfig.for_disparity(64, *VARIANTS['S'])
        aggregator = build_aggregator(config, (8, 8, 16), rng=rng)
        self.assertEqual([len(aggregator.enc4), len(aggregator.enc8), len(aggregator.enc16)], [1, 2, 4])
        volume = rng.standard_normal((1, 16, 16, 24)).astype(np.float32)
        out = aggregate(volume, pyramid(rng, 1, (8, 8, 16), 16, 24), config, aggregator)
        self.assertEqual(out.shape, volume.shape)
        self.assertEqual(out.dtype, np.float32)

    def test_default_width_s_volume(self):
        rng = np.random.default_rng(1)
        config = AggregationConfig.for_disparity(192, *VARIANTS['S'])
        aggregator = CostAggregator(config, (48, 64, 96), rng)
        volume = rng.standard_normal((1, 48, 16, 24)).astype(np.float32)
        self.assertEqual(aggregator(volume, pyramid(rng, 1, (48, 64, 96), 16, 24)).shape, (1, 48, 16, 24))

    def test_odd_sizes_round_up(self):
        rng = np.random.default_rng(2)
        config = AggregationConfig(blocks=(1, 1, 1), expansion=(2, 2, 2), channels=(4, 8, 8))
        aggregator = CostAggregator(config, (4, 4, 4), rng)
        volume = rng.standard_normal((2, 4, 5, 7))
        self.assertEqual(aggregator(volume, pyramid(rng, 2, (4, 4, 4), 5, 7)).shape, (2, 4, 5, 7))

    def test_runs_without_attention(self):
        rng = np.random.default_rng(3)
        config = AggregationConfig(blocks=(1, 1, 1), expansion=(2, 2, 2), channels=(4, 8, 8), use_msca=False)
        aggregator = CostAggregator(config, (4, 4, 4), rng)
        self.assertFalse(hasattr(aggregator, 'msca4'))
        out = aggregator(rng.standard_normal((1, 4, 8, 8)), FeaturePyramid())
        self.assertEqual(out.shape, (1, 4, 8, 8))

    def test_misaligned_pyramid(self):
        rng = np.random.default_rng(4)
        config = AggregationConfig(blocks=(1, 1, 1), expansion=(2, 2, 2), channels=(4, 8, 8))
        aggregator = CostAggregator(config, (4, 4, 4), rng)
        features = pyramid(rng, 1, (4, 4, 4), 8, 8)
        features.f8 = features.f8[:, :, :3]
        with self.assertRaises(ConfigurationError):
            aggregator(rng.standard_normal((1, 4, 8, 8)), features)
        with self.assertRaises(ConfigurationError):
            aggregator(rng.standard_normal((1, 6, 8, 8)), pyramid(rng, 1, (4, 4, 4), 8, 8))

    def test_aggregate_checks_config(self):
        rng = np.random.default_rng(5)
        config = AggregationConfig(blocks=(1, 1, 1), expansion=(2, 2, 2), channels=(4, 8, 8))
        aggregator = CostAggregator(config, (4, 4, 4), rng)
        with self.assertRaises(ConfigurationError):
            aggregate(np.zeros((1, 4, 8, 8)), FeaturePyramid(), AggregationConfig(), aggregator)

    def test_inverted_residual_wrapper_checks_channels(self):
        block = InvertedResidual(4, 4, np.random.default_rng(6))
        with self.assertRaises(ConfigurationError):
            inverted_residual(np.zeros((1, 3, 4, 4)), block)
        self.assertEqual(inverted_residual(np.zeros((1, 4, 4, 4)), block).shape, (1, 4, 4, 4))

    def test_large_variant_aggregator_size(self):
        config = AggregationConfig.for_disparity(192, *VARIANTS['L'])
        aggregator = CostAggregator(config, (48, 64, 96), np.random.default_rng(7))
        blocks = sum(
            b * (2 * t * c * c + 9 * t * c)
            for b, t, c in zip(config.blocks, config.expansion, config.channels)
        )
        self.assertGreater(aggregator.num_parameters(), blocks)
        self.assertLess(abs(aggregator.num_parameters() / 22e6 - 1), 0.15)
