"""Soft-argmax disparity regression and upsampling to full resolution."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor_ops as ops
from .exceptions import ConfigurationError


@dataclass
class DisparityMap:
    """Disparities in full-resolution pixels, (H, W) or (n, H, W), with a validity mask."""

    values: np.ndarray
    valid: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ConfigurationError(f'mask shape {self.valid.shape} does not match values {self.values.shape}')

    @property
    def shape(self):
        return self.values.shape

    def __getitem__(self, index):
        return DisparityMap(self.values[index], self.valid[index])


def _disparity_axis(channels):
    return np.arange(channels, dtype=np.float64)[None, :, None, None]


def _probabilities(costs):
    return ops.channel_softmax(costs.astype(np.float64))


def soft_argmax(costs):
    """Expected disparity index under the channel softmax: (n, D/4, h, w) -> (n, 1, h, w)."""
    costs = ops.check_tensor(costs, 'disparity logits')
    ops.check_finite(costs, 'soft_argmax input')
    out = (_probabilities(costs) * _disparity_axis(costs.shape[1])).sum(axis=1, keepdims=True)
    return ops.finish(np.clip(out, 0, costs.shape[1] - 1), costs.dtype, 'soft_argmax')


def soft_argmax_backward(costs, grad_output):
    """d loss / d logits = g * p_d * (d - d_hat)."""
    costs = ops.check_tensor(costs, 'disparity logits')
    if grad_output.shape != (costs.shape[0], 1, *costs.shape[2:]):
        raise ConfigurationError(f'soft_argmax grad {grad_output.shape} does not match logits {costs.shape}')
    p = _probabilities(costs)
    d = _disparity_axis(costs.shape[1])
    expected = (p * d).sum(axis=1, keepdims=True)
    gi = grad_output.astype(np.float64) * p * (d - expected)
    return ops.finish(gi, costs.dtype, 'soft_argmax_backward')


def upsample_disparity(quarter, height, width, keep_batch=False):
    """
    Bilinear resize of the quarter-scale map to (height, width), values scaled by 4.

    A single-sample result is (height, width) unless ``keep_batch`` is set.
    """
    quarter = ops.check_tensor(quarter, 'quarter disparity')
    if quarter.shape[1] != 1:
        raise ConfigurationError(f'quarter disparity must have one channel, got {quarter.shape[1]}')
    full = ops.bilinear_resize(quarter, height, width) * 4
    values = full[:, 0]
    if values.shape[0] == 1 and not keep_batch:
        values = values[0]
    return DisparityMap(values)


def upsample_disparity_backward(grad_full, quarter_height, quarter_width):
    """Gradient w.r.t. the quarter map given the gradient w.r.t. the full map values."""
    g = np.asarray(grad_full)
    if g.ndim == 2:
        g = g[None]
    return ops.bilinear_resize_backward(g[:, None] * 4, quarter_height, quarter_width)


def trace_regression(tracer, shape, height, width, name='regression'):
    n, d, h, w = shape
    tracer.record(f'{name}.soft_argmax', elementwise=2 * n * d * h * w)
    tracer.record(f'{name}.upsample', elementwise=n * height * width)
    return n, 1, height, width
