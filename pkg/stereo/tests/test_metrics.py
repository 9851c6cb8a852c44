import numpy as np
from django.test import SimpleTestCase

from stereo.exceptions import ConfigurationError, EmptyMaskError
from stereo.metrics import compute_metrics
from stereo.regression import DisparityMap


class MetricsTests(SimpleTestCase):
    def setUp(self):
        self.gt = DisparityMap(np.random.default_rng(0).uniform(1, 50, (6, 8)))

    def test_perfect_prediction(self):
        record = compute_metrics(self.gt, self.gt)
        self.assertEqual(record.epe, 0.0)
        self.assertEqual((record.bad_1, record.bad_2, record.bad_3, record.d1), (0.0, 0.0, 0.0, 0.0))
        self.assertEqual(record.valid_pixels, 48)

    def test_uniform_one_pixel_error(self):
        record = compute_metrics(DisparityMap(self.gt.values + 1), self.gt)
        self.assertAlmostEqual(record.epe, 1.0)
        self.assertEqual(record.bad_3, 0.0)

    def test_d1_needs_both_conditions(self):
        gt = DisparityMap(np.full((4, 4), 100.0))
        record = compute_metrics(DisparityMap(np.full((4, 4), 104.0)), gt)
        self.assertEqual(record.bad_3, 1.0)
        self.assertEqual(record.d1, 0.0)
        record = compute_metrics(DisparityMap(np.full((4, 4), 106.0)), gt)
        self.assertEqual(record.d1, 1.0)

    def test_invalid_pixels_are_ignored(self):
        valid = np.ones((6, 8), dtype=bool)
        valid[:, :4] = False
        pred = self.gt.values.copy()
        pred[:, :4] = 1e6
        pred[0, 0] = np.nan
        record = compute_metrics(DisparityMap(pred), DisparityMap(self.gt.values, valid))
        self.assertEqual(record.epe, 0.0)
        self.assertEqual(record.valid_pixels, 24)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        pred = DisparityMap(self.gt.values + rng.normal(0, 3, (6, 8)))
        order = rng.permutation(48)
        shuffled = compute_metrics(
            DisparityMap(pred.values.ravel()[order]), DisparityMap(self.gt.values.ravel()[order]),
        )
        record = compute_metrics(pred, self.gt)
        self.assertAlmostEqual(record.epe, shuffled.epe)
        self.assertEqual(record.bad, shuffled.bad)
        self.assertEqual(record.d1, shuffled.d1)

    def test_extra_thresholds(self):
        record = compute_metrics(DisparityMap(self.gt.values + 0.75), self.gt, thresholds=(0.5,))
        self.assertEqual(sorted(record.bad), [0.5, 1.0, 2.0, 3.0])
        self.assertEqual(record.bad[0.5], 1.0)
        self.assertEqual([name for name, _ in record.as_rows()][:5], ['epe', 'bad_0.5', 'bad_1', 'bad_2', 'bad_3'])

    def test_errors(self):
        with self.assertRaises(ConfigurationError):
            compute_metrics(DisparityMap(np.zeros((2, 2))), DisparityMap(np.zeros((2, 3))))
        with self.assertRaises(EmptyMaskError):
            compute_metrics(DisparityMap(np.zeros((2, 2))), DisparityMap(np.zeros((2, 2)), np.zeros((2, 2), bool)))
