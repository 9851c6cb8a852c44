import numpy as np
from django.test import SimpleTestCase

from stereo.analysis import Tracer
from stereo.cost_volume import (
    build_correlation_volume, check_max_disparity, correlation_backward, correlation_macs, trace_correlation,
)
from stereo.exceptions import ConfigurationError
from stereo.gradcheck import relative_error


def correlation_oracle(left, right, disparities):
    n, c, h, w = left.shape
    out = np.zeros((n, disparities, h, w))
    for k in range(n):
        for d in range(disparities):
            for y in range(h):
                for x in range(d, w):
                    out[k, d, y, x] = sum(left[k, ch, y, x] * right[k, ch, y, x - d] for ch in range(c)) / c
    return out


class CorrelationTests(SimpleTestCase):
    def test_hand_evaluated_cost(self):
        left = np.zeros((1, 2, 1, 3))
        right = np.zeros((1, 2, 1, 3))
        left[0, :, 0, 2] = (1, 2)
        right[0, :, 0, 1] = (3, 4)
        volume = build_correlation_volume(left, right, 8)
        self.assertEqual(volume.disparities, 2)
        self.assertEqual(volume.data[0, 1, 0, 2], 5.5)

    def test_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(0)
        for case in range(50):
            with self.subTest(case=case):
                shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 9)))
                left = rng.standard_normal(shape)
                right = rng.standard_normal(shape)
                max_disparity = 4 * int(rng.integers(1, 6))
                volume = build_correlation_volume(left, right, max_disparity).data
                self.assertLess(relative_error(volume, correlation_oracle(left, right, max_disparity // 4)), 1e-5)

    def test_columns_without_partner_are_zero(self):
        rng = np.random.default_rng(1)
        volume = build_correlation_volume(rng.standard_normal((1, 3, 2, 5)), rng.standard_normal((1, 3, 2, 5)), 32).data
        for d in range(8):
            self.assertFalse(volume[:, d, :, :min(d, 5)].any())

    def test_self_correlation_peaks_at_zero_for_unit_features(self):
        rng = np.random.default_rng(2)
        features = rng.standard_normal((1, 4, 3, 10))
        features /= np.linalg.norm(features, axis=1, keepdims=True)
        volume = build_correlation_volume(features, features, 16).data
        np.testing.assert_allclose(volume[0, 0], (features[0] ** 2).mean(axis=0))
        self.assertTrue((volume[0, 0] >= volume[0].max(axis=0) - 1e-12).all())

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        left = rng.standard_normal((1, 2, 2, 12))
        right = rng.standard_normal((1, 2, 2, 12))
        k = 2
        shifted = build_correlation_volume(np.roll(left, k, axis=3), np.roll(right, k, axis=3), 8).data
        base = build_correlation_volume(left, right, 8).data
        # away from the left border both volumes see the same pairs
        np.testing.assert_allclose(shifted[..., 2 * k + 1:], base[..., k + 1:-k])

    def test_backward_is_adjoint(self):
        rng = np.random.default_rng(4)
        left = rng.standard_normal((2, 3, 2, 6))
        right = rng.standard_normal((2, 3, 2, 6))
        g = rng.standard_normal((2, 2, 2, 6))
        gl, gr = correlation_backward(left, right, g)
        # the volume is bilinear, so <g, C(l, r)> = <gl, l> = <gr, r>
        inner = (build_correlation_volume(left, right, 8).data * g).sum()
        self.assertAlmostEqual((gl * left).sum(), inner, places=10)
        self.assertAlmostEqual((gr * right).sum(), inner, places=10)

    def test_rejects_bad_inputs(self):
        with self.assertRaises(ConfigurationError):
            check_max_disparity(30)
        with self.assertRaises(ConfigurationError):
            build_correlation_volume(np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 5)), 8)

    def test_macs_exclude_missing_columns(self):
        self.assertEqual(correlation_macs((1, 2, 3, 5), 32), 2 * 3 * (5 + 4 + 3 + 2 + 1))
        tracer = Tracer()
        self.assertEqual(trace_correlation(tracer, (1, 48, 136, 240), 192), (1, 48, 136, 240))
        self.assertEqual(tracer.records[0].macs, correlation_macs((1, 48, 136, 240), 192))
