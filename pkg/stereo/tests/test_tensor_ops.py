import numpy as np
from django.test import SimpleTestCase

from stereo import tensor_ops as ops
from stereo.exceptions import ConfigurationError, NumericError
from stereo.gradcheck import relative_error


def conv_oracle(x, weight, bias, stride, padding, groups):
    """Direct summation over every output element."""
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    (sh, sw), (ph, pw) = stride, padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    per_group = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for k in range(n):
        for o in range(cout):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    patch = xp[k, g * cg:(g + 1) * cg, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    out[k, o, i, j] = (patch * weight[o]).sum() + (0 if bias is None else bias[o])
    return out


def interpolation_oracle(x, out_h, out_w):
    h, w = x.shape

    def source(i, in_size, out_size):
        s = max((i + 0.5) * in_size / out_size - 0.5, 0.0)
        i0 = min(int(np.floor(s)), in_size - 1)
        return i0, min(i0 + 1, in_size - 1), s - i0

    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y0, y1, fy = source(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = source(j, w, out_w)
            top = x[y0, x0] * (1 - fx) + x[y0, x1] * fx
            bottom = x[y1, x0] * (1 - fx) + x[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bottom * fy
    return out


class Conv2dTests(SimpleTestCase):
    def test_identity_kernel(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1
        out = ops.conv2d(x, ops.ConvParams(w, padding=(1, 1)))
        np.testing.assert_array_equal(out, x)
        self.assertEqual(out.dtype, np.float32)

    def test_zero_weights(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32)
        out = ops.conv2d(x, ops.ConvParams(np.zeros((4, 3, 3, 3), dtype=np.float32), padding=(1, 1)))
        self.assertFalse(out.any())

    def test_strided_matches_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        out = ops.conv2d(x, ops.ConvParams(w, stride=(2, 2), padding=(1, 1)))
        self.assertEqual(out.shape, (1, 3, 2, 2))
        self.assertLess(relative_error(out, conv_oracle(x, w, None, (2, 2), (1, 1), 1)), 1e-5)

    def test_randomized_cases_match_oracle(self):
        rng = np.random.default_rng(2)
        kernels = [(1, 1), (3, 3), (5, 5), (1, 5), (5, 1), (1, 7), (7, 1)]
        for case in range(60):
            with self.subTest(case=case):
                c = int(rng.choice([1, 2, 4]))
                groups = int(rng.choice([g for g in (1, 2, c) if c % g == 0]))
                cout = groups * int(rng.integers(1, 3))
                kh, kw = kernels[case % len(kernels)]
                stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
                padding = ((kh - 1) // 2, (kw - 1) // 2)
                x = rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(5, 9)), int(rng.integers(5, 9))))
                w = rng.standard_normal((cout, c // groups, kh, kw))
                b = rng.standard_normal(cout) if case % 2 else None
                out = ops.conv2d(x, ops.ConvParams(w, b, stride, padding, groups))
                expected = conv_oracle(x, w, b, stride, padding, groups)
                self.assertEqual(out.shape, expected.shape)
                self.assertLess(relative_error(out, expected), 1e-5)

    def test_depthwise_with_channel_multiplier(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 3, 6, 6))
        w = rng.standard_normal((6, 1, 3, 3))
        out = ops.conv2d(x, ops.ConvParams(w, padding=(1, 1), groups=3))
        self.assertLess(relative_error(out, conv_oracle(x, w, None, (1, 1), (1, 1), 3)), 1e-5)

    def test_zero_grad_output_gives_zero_gradients(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 2, 5, 5))
        params = ops.ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), padding=(1, 1))
        gi, gw, gb = ops.conv2d_backward(x, params, np.zeros((2, 3, 5, 5)))
        self.assertFalse(gi.any() or gw.any() or gb.any())

    def test_single_pixel_pointwise_backward(self):
        x = np.array([2.0, -1.0]).reshape(1, 2, 1, 1)
        w = np.array([[1.0, 3.0], [0.5, -2.0], [4.0, 1.0]]).reshape(3, 2, 1, 1)
        go = np.array([1.0, 2.0, -1.0]).reshape(1, 3, 1, 1)
        gi, gw, gb = ops.conv2d_backward(x, ops.ConvParams(w, np.zeros(3)), go)
        np.testing.assert_allclose(gw.reshape(3, 2), np.outer(go.ravel(), x.ravel()))
        np.testing.assert_allclose(gi.ravel(), w.reshape(3, 2).T @ go.ravel())
        np.testing.assert_allclose(gb, go.ravel())

    def test_rejects_bad_groups_and_tiny_inputs(self):
        x = np.zeros((1, 3, 4, 4))
        with self.assertRaises(ConfigurationError):
            ops.conv2d(x, ops.ConvParams(np.zeros((4, 1, 3, 3)), groups=2))
        with self.assertRaises(ConfigurationError):
            ops.conv2d(x, ops.ConvParams(np.zeros((2, 3, 5, 5))))
        with self.assertRaises(ConfigurationError):
            ops.conv2d(np.zeros((3, 4, 4)), ops.ConvParams(np.zeros((2, 3, 1, 1))))

    def test_non_finite_input_raises(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with self.assertRaises(NumericError):
            ops.conv2d(x, ops.ConvParams(np.ones((1, 1, 3, 3)), padding=(1, 1)))

    def test_thread_count_does_not_change_results(self):
        self.addCleanup(ops.set_num_threads, ops.get_num_threads())
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 4, 7, 7)).astype(np.float32)
        params = ops.ConvParams(rng.standard_normal((8, 2, 3, 3)).astype(np.float32), padding=(1, 1), groups=2)
        go = rng.standard_normal((4, 8, 7, 7)).astype(np.float32)
        ops.set_num_threads(1)
        single = ops.conv2d(x, params), ops.conv2d_backward(x, params, go)
        ops.set_num_threads(3)
        pooled = ops.conv2d(x, params), ops.conv2d_backward(x, params, go)
        np.testing.assert_array_equal(single[0], pooled[0])
        for a, b in zip(single[1], pooled[1]):
            np.testing.assert_array_equal(a, b)

    def test_invalid_thread_count(self):
        with self.assertRaises(ConfigurationError):
            ops.set_num_threads(0)


class ActivationAndNormTests(SimpleTestCase):
    def test_relu6_clamps(self):
        x = np.array([7.0, -1.0, 3.5]).reshape(1, 3, 1, 1)
        np.testing.assert_array_equal(ops.relu6(x).ravel(), [6.0, 0.0, 3.5])

    def test_relu6_backward_masks_saturated_inputs(self):
        x = np.array([7.0, -1.0, 3.5]).reshape(1, 3, 1, 1)
        g = ops.relu6_backward(x, np.ones_like(x))
        np.testing.assert_array_equal(g.ravel(), [0.0, 0.0, 1.0])

    def test_batch_norm_identity_parameters(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        out = ops.batch_norm(x, ops.BatchNormParams.identity(3, np.float64))
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))

    def test_batch_norm_constant_channel_gives_beta(self):
        x = np.full((2, 1, 3, 3), 4.0)
        params = ops.BatchNormParams.identity(1, np.float64)
        params.beta[...] = 0.25
        out = ops.batch_norm(x, params, training=True)
        np.testing.assert_allclose(out, 0.25)

    def test_batch_norm_training_statistics(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 4)) * 3 + 1
        params = ops.BatchNormParams(
            gamma=np.array([1.0, 2.0, 0.5]), beta=np.array([0.0, -1.0, 3.0]),
            running_mean=np.zeros(3), running_var=np.ones(3),
        )
        out = ops.batch_norm(x, params, training=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), params.beta, atol=1e-4)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), params.gamma, rtol=1e-4)

    def test_batch_norm_updates_running_statistics(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 3, 3))
        params = ops.BatchNormParams.identity(2, np.float64)
        ops.batch_norm(x, params, training=True)
        np.testing.assert_allclose(params.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(params.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_batch_norm_eval_leaves_running_statistics(self):
        params = ops.BatchNormParams.identity(2, np.float64)
        ops.batch_norm(np.ones((1, 2, 2, 2)), params)
        np.testing.assert_array_equal(params.running_mean, 0)


class ResizeSoftmaxTests(SimpleTestCase):
    def test_same_size_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 3, 5))
        np.testing.assert_allclose(ops.bilinear_resize(x, 3, 5), x)

    def test_constant_stays_constant(self):
        out = ops.bilinear_resize(np.full((1, 1, 3, 4), 2.5), 7, 9)
        np.testing.assert_allclose(out, 2.5)

    def test_upsample_matches_per_pixel_oracle(self):
        x = np.array([[1.0, 2.0], [3.0, 5.0]])
        out = ops.bilinear_resize(x[None, None], 4, 4)[0, 0]
        np.testing.assert_allclose(out, interpolation_oracle(x, 4, 4))
        np.testing.assert_allclose(out[0], [1.0, 1.25, 1.75, 2.0])

    def test_resize_backward_is_adjoint(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 3, 4))
        g = rng.standard_normal((1, 2, 6, 7))
        forward = (ops.bilinear_resize(x, 6, 7) * g).sum()
        backward = (ops.bilinear_resize_backward(g, 3, 4) * x).sum()
        self.assertAlmostEqual(forward, backward, places=10)

    def test_softmax_symmetry_and_stability(self):
        out = ops.channel_softmax(np.zeros((1, 2, 1, 1)))
        np.testing.assert_allclose(out.ravel(), [0.5, 0.5])
        out = ops.channel_softmax(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))
        np.testing.assert_allclose(out.ravel(), [1.0, 0.0], atol=1e-12)

    def test_softmax_sums_to_one(self):
        x = np.random.default_rng(2).standard_normal((2, 6, 3, 4)) * 5
        np.testing.assert_allclose(ops.channel_softmax(x).sum(axis=1), 1.0, atol=1e-6)


class ElementwiseTests(SimpleTestCase):
    def setUp(self):
        self.x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))

    def test_identities(self):
        np.testing.assert_array_equal(ops.ewise('add', self.x, np.zeros_like(self.x)), self.x)
        np.testing.assert_array_equal(ops.ewise('mul', self.x, np.ones_like(self.x)), self.x)
        self.assertFalse(ops.ewise('mul', self.x, np.zeros_like(self.x)).any())

    def test_unknown_op_and_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            ops.ewise('sub', self.x, self.x)
        with self.assertRaises(ConfigurationError):
            ops.ewise('add', self.x, np.zeros((1, 2, 3, 4)))

    def test_concat_layout(self):
        a = np.zeros((1, 2, 2, 2))
        b = np.arange(24, dtype=np.float64).reshape(1, 3, 2, 2)
        out = ops.concat_channels([a, b])
        self.assertEqual(out.shape, (1, 5, 2, 2))
        np.testing.assert_array_equal(out[:, 2], b[:, 0])
        ga, gb = ops.concat_channels_backward(out, [2, 3])
        np.testing.assert_array_equal(gb, b)

    def test_accumulate_treats_none_as_zero(self):
        self.assertIs(ops.accumulate(None, self.x), self.x)
        self.assertIs(ops.accumulate(self.x, None), self.x)
        np.testing.assert_array_equal(ops.accumulate(self.x, self.x), 2 * self.x)
