"""Correlation cost volume at quarter resolution, disparity on the channel axis."""
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor_ops as ops
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class CostVolume:
    data: np.ndarray
    max_disparity_full: int

    @property
    def disparities(self):
        return self.max_disparity_full // 4


def check_max_disparity(max_disparity_full):
    if max_disparity_full < 4 or max_disparity_full % 4:
        raise ConfigurationError(f'max disparity must be a positive multiple of 4, got {max_disparity_full}')
    return max_disparity_full // 4


def build_correlation_volume(left, right, max_disparity_full):
    """
    C[d, h, w] = mean_c left[c, h, w] * right[c, h, w - d] for d in [0, D/4).

    Columns with w < d have no partner in the right view and stay zero.
    """
    left = ops.check_tensor(left, 'left features')
    right = ops.check_tensor(right, 'right features')
    if left.shape != right.shape:
        raise ConfigurationError(f'left features {left.shape} and right features {right.shape} differ')
    disparities = check_max_disparity(max_disparity_full)
    n, c, h, w = left.shape
    lf = left.astype(np.float64)
    rf = right.astype(np.float64)
    out = np.zeros((n, disparities, h, w))
    for d in range(min(disparities, w)):
        out[:, d, :, d:] = np.einsum('nchw,nchw->nhw', lf[..., d:], rf[..., :w - d]) / c
    dtype = np.result_type(left.dtype, right.dtype)
    return CostVolume(data=ops.finish(out, dtype, 'correlation'), max_disparity_full=max_disparity_full)


def correlation_backward(left, right, grad_output):
    """Return (grad_left, grad_right) for ``build_correlation_volume``."""
    if left.shape != right.shape:
        raise ConfigurationError(f'left features {left.shape} and right features {right.shape} differ')
    n, c, h, w = left.shape
    if grad_output.shape[0] != n or grad_output.shape[2:] != (h, w):
        raise ConfigurationError(f'correlation grad {grad_output.shape} does not match features {left.shape}')
    lf = left.astype(np.float64)
    rf = right.astype(np.float64)
    g = grad_output.astype(np.float64) / c
    gl = np.zeros_like(lf)
    gr = np.zeros_like(rf)
    for d in range(min(grad_output.shape[1], w)):
        gd = g[:, d:d + 1, :, d:]
        gl[..., d:] += gd * rf[..., :w - d]
        gr[..., :w - d] += gd * lf[..., d:]
    return (
        ops.finish(gl, left.dtype, 'correlation_backward'),
        ops.finish(gr, right.dtype, 'correlation_backward'),
    )


def correlation_macs(shape, max_disparity_full):
    """Multiply-accumulates of the volume for features of ``shape``, out-of-range columns excluded."""
    n, c, h, w = shape
    disparities = check_max_disparity(max_disparity_full)
    return n * c * h * sum(max(w - d, 0) for d in range(disparities))


def trace_correlation(tracer, shape, max_disparity_full, name='cost.correlation'):
    n, _, h, w = shape
    tracer.record(name, macs=correlation_macs(shape, max_disparity_full))
    return n, max_disparity_full // 4, h, w
