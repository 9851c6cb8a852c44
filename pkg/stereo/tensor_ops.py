"""
Dense 4-D tensor kernels (n, c, h, w) with hand-written backward passes.

Tensors are plain numpy arrays. Kernels keep the floating dtype of their
inputs (float32 unless given float64) and accumulate in float64. Every kernel
refuses to return non-finite values.

Convolution runs one sample at a time; samples may be spread over a thread
pool, but the per-sample arithmetic and the order in which per-sample weight
gradients are summed never depend on the thread count.
"""
import functools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, NumericError

logger = logging.getLogger(__name__)

_pool_lock = threading.Lock()
_num_threads = 1
_executor = None


def set_num_threads(n):
    """Set the number of worker threads used by the convolution kernels."""
    global _num_threads, _executor
    n = int(n)
    if n < 1:
        raise ConfigurationError(f'thread count must be >= 1, got {n}')
    with _pool_lock:
        if n == _num_threads:
            return
        if _executor is not None:
            _executor.shutdown(wait=True)
            _executor = None
        _num_threads = n


def get_num_threads():
    return _num_threads


def _map_samples(fn, count):
    global _executor
    if _num_threads <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with _pool_lock:
        if _executor is None:
            _executor = ThreadPoolExecutor(max_workers=_num_threads, thread_name_prefix='stereo-kernel')
        executor = _executor
    return list(executor.map(fn, range(count)))


def check_tensor(x, name='tensor'):
    """Return ``x`` as a 4-D floating array or raise ConfigurationError."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ConfigurationError(f'{name} must be 4-D (n, c, h, w), got shape {x.shape}')
    if min(x.shape) < 1:
        raise ConfigurationError(f'{name} has an empty dimension: {x.shape}')
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return x


def check_finite(x, op):
    if not np.isfinite(x).all():
        logger.error('%s: non-finite values detected', op)
        raise NumericError(f'{op}: non-finite values detected')


def finish(out, dtype, op):
    check_finite(out, op)
    return out.astype(dtype, copy=False)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ConfigurationError(f'{op}: shape mismatch {a.shape} vs {b.shape}')


@dataclass
class ConvParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, h, w):
        kh, kw = self.kernel_size
        ho = (h + 2 * self.padding[0] - kh) // self.stride[0] + 1
        wo = (w + 2 * self.padding[1] - kw) // self.stride[1] + 1
        return ho, wo


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


# Convolution

def _validate_conv(x, params):
    w = np.asarray(params.weight)
    if w.ndim != 4:
        raise ConfigurationError(f'conv2d: weight must be 4-D, got shape {w.shape}')
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    g = params.groups
    if g < 1 or c % g or cout % g:
        raise ConfigurationError(f'conv2d: channels ({c} in, {cout} out) not divisible by groups={g}')
    if cg * g != c:
        raise ConfigurationError(
            f'conv2d: input has {c} channels, weight {w.shape} with groups={g} expects {cg * g}'
        )
    if params.bias is not None and np.shape(params.bias) != (cout,):
        raise ConfigurationError(f'conv2d: bias shape {np.shape(params.bias)} does not match {cout} outputs')
    ho, wo = params.output_size(h, wd)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f'conv2d: input {h}x{wd} too small for kernel {kh}x{kw}')
    return ho, wo


def _taps(params, ho, wo):
    kh, kw = params.kernel_size
    sh, sw = params.stride
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))


def _is_depthwise(weight, groups):
    return weight.shape[1] == 1 and weight.shape[0] == groups


def _conv_sample(xs, w, params, ho, wo):
    g = params.groups
    cout, cg = w.shape[:2]
    if _is_depthwise(w, g):
        out = np.zeros((cout, ho, wo))
        for i, j, window in _taps(params, ho, wo):
            out += w[:, 0, i, j, None, None] * xs[window]
        return out
    wg = w.reshape(g, cout // g, cg, *w.shape[2:])
    out = np.zeros((g, cout // g, ho * wo))
    for i, j, window in _taps(params, ho, wo):
        patch = xs[window].reshape(g, cg, ho * wo)
        out += np.matmul(wg[:, :, :, i, j], patch)
    return out.reshape(cout, ho, wo)


def conv2d(x, params: ConvParams):
    """Zero-padded grouped cross-correlation plus optional bias."""
    x = check_tensor(x, 'conv2d input')
    ho, wo = _validate_conv(x, params)
    check_finite(x, 'conv2d input')
    dtype = np.result_type(x.dtype, params.weight.dtype)
    ph, pw = params.padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w = np.asarray(params.weight, dtype=np.float64)

    out = np.stack(_map_samples(lambda k: _conv_sample(xp[k], w, params, ho, wo), x.shape[0]))
    if params.bias is not None:
        out += np.asarray(params.bias, dtype=np.float64)[None, :, None, None]
    return finish(out, dtype, 'conv2d')


def _conv_sample_backward(xs, go, w, params, ho, wo):
    g = params.groups
    cout, cg = w.shape[:2]
    gxs = np.zeros_like(xs)
    gw = np.zeros_like(w)
    if _is_depthwise(w, g):
        for i, j, window in _taps(params, ho, wo):
            gw[:, 0, i, j] = np.einsum('chw,chw->c', go, xs[window])
            gxs[window] += w[:, 0, i, j, None, None] * go
        return gxs, gw
    wg = w.reshape(g, cout // g, cg, *w.shape[2:])
    gwg = gw.reshape(wg.shape)
    gog = go.reshape(g, cout // g, ho * wo)
    c = xs.shape[0]
    for i, j, window in _taps(params, ho, wo):
        patch = xs[window].reshape(g, cg, ho * wo)
        gwg[:, :, :, i, j] = np.matmul(gog, patch.transpose(0, 2, 1))
        gxs[window] += np.matmul(wg[:, :, :, i, j].transpose(0, 2, 1), gog).reshape(c, ho, wo)
    return gxs, gw


def conv2d_backward(x, params: ConvParams, grad_output):
    """Return (grad_input, grad_weight, grad_bias) for ``conv2d(x, params)``."""
    x = check_tensor(x, 'conv2d input')
    ho, wo = _validate_conv(x, params)
    grad_output = check_tensor(grad_output, 'conv2d grad_output')
    n, c, h, wd = x.shape
    expected = (n, params.out_channels, ho, wo)
    if grad_output.shape != expected:
        raise ConfigurationError(f'conv2d_backward: grad_output shape {grad_output.shape}, expected {expected}')
    ph, pw = params.padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w = np.asarray(params.weight, dtype=np.float64)
    go = grad_output.astype(np.float64)

    parts = _map_samples(lambda k: _conv_sample_backward(xp[k], go[k], w, params, ho, wo), n)
    gi = np.stack([p[0] for p in parts])[:, :, ph:ph + h, pw:pw + wd]
    gw = np.zeros_like(w)
    for _, part in parts:
        gw += part
    gb = go.sum(axis=(0, 2, 3))
    return (
        finish(gi, x.dtype, 'conv2d_backward'),
        finish(gw, params.weight.dtype, 'conv2d_backward'),
        finish(gb, params.weight.dtype, 'conv2d_backward'),
    )


# Activation

def relu6(x):
    x = check_tensor(x, 'relu6 input')
    return finish(np.clip(x, 0, 6), x.dtype, 'relu6')


def relu6_backward(x, grad_output):
    x = check_tensor(x, 'relu6 input')
    _same_shape(x, grad_output, 'relu6_backward')
    mask = (x > 0) & (x < 6)
    return finish(np.where(mask, grad_output, 0), x.dtype, 'relu6_backward')


# Batch normalization

def _batch_stats(x):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    return x64, mean, var


def _check_bn(x, params):
    c = x.shape[1]
    for name in ('gamma', 'beta', 'running_mean', 'running_var'):
        if np.shape(getattr(params, name)) != (c,):
            raise ConfigurationError(f'batch_norm: {name} must have length {c}')
    if params.epsilon <= 0:
        raise ConfigurationError('batch_norm: epsilon must be positive')


def batch_norm(x, params: BatchNormParams, training=False):
    """
    Per-channel normalization with affine transform.

    In training mode the batch statistics are used and the running statistics
    are updated in place (unbiased variance, exponential moving average).
    """
    x = check_tensor(x, 'batch_norm input')
    _check_bn(x, params)
    gamma = params.gamma.astype(np.float64)
    beta = params.beta.astype(np.float64)
    if training:
        x64, mean, var = _batch_stats(x)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * unbiased
    else:
        x64 = x.astype(np.float64)
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    out = (x64 - mean[None, :, None, None]) * (gamma * inv_std)[None, :, None, None] + beta[None, :, None, None]
    return finish(out, x.dtype, 'batch_norm')


def batch_norm_backward(x, params: BatchNormParams, grad_output, training=False):
    """Return (grad_input, grad_gamma, grad_beta)."""
    x = check_tensor(x, 'batch_norm input')
    _check_bn(x, params)
    _same_shape(x, grad_output, 'batch_norm_backward')
    g = grad_output.astype(np.float64)
    gamma = params.gamma.astype(np.float64)
    if training:
        x64, mean, var = _batch_stats(x)
    else:
        x64 = x.astype(np.float64)
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    g_beta = g.sum(axis=(0, 2, 3))
    g_gamma = (g * xhat).sum(axis=(0, 2, 3))
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        gi = (gamma * inv_std / count)[None, :, None, None] * (
            count * g - g_beta[None, :, None, None] - xhat * g_gamma[None, :, None, None]
        )
    else:
        gi = g * (gamma * inv_std)[None, :, None, None]
    return (
        finish(gi, x.dtype, 'batch_norm_backward'),
        finish(g_gamma, params.gamma.dtype, 'batch_norm_backward'),
        finish(g_beta, params.beta.dtype, 'batch_norm_backward'),
    )


# Resize

@functools.lru_cache(maxsize=256)
def interpolation_matrix(in_size, out_size, align_corners=False):
    """(out_size, in_size) matrix of 1-D linear interpolation weights."""
    if in_size < 1 or out_size < 1:
        raise ConfigurationError(f'resize sizes must be >= 1, got {in_size} -> {out_size}')
    m = np.zeros((out_size, in_size))
    for i in range(out_size):
        if align_corners:
            src = i * (in_size - 1) / (out_size - 1) if out_size > 1 else 0.0
        else:
            src = max((i + 0.5) * in_size / out_size - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x, out_h, out_w, align_corners=False):
    x = check_tensor(x, 'bilinear_resize input')
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f'bilinear_resize: output size must be >= 1, got {out_h}x{out_w}')
    ah = interpolation_matrix(x.shape[2], out_h, align_corners)
    aw = interpolation_matrix(x.shape[3], out_w, align_corners)
    out = np.matmul(np.matmul(ah, x.astype(np.float64)), aw.T)
    return finish(out, x.dtype, 'bilinear_resize')


def bilinear_resize_backward(grad_output, in_h, in_w, align_corners=False):
    grad_output = check_tensor(grad_output, 'bilinear_resize grad_output')
    ah = interpolation_matrix(in_h, grad_output.shape[2], align_corners)
    aw = interpolation_matrix(in_w, grad_output.shape[3], align_corners)
    gi = np.matmul(np.matmul(ah.T, grad_output.astype(np.float64)), aw)
    return finish(gi, grad_output.dtype, 'bilinear_resize_backward')


# Softmax

def channel_softmax(x):
    x = check_tensor(x, 'channel_softmax input')
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    return finish(e / e.sum(axis=1, keepdims=True), x.dtype, 'channel_softmax')


def channel_softmax_backward(output, grad_output):
    """Backward from the softmax *output*."""
    _same_shape(output, grad_output, 'channel_softmax_backward')
    s = output.astype(np.float64)
    g = grad_output.astype(np.float64)
    gi = s * (g - (g * s).sum(axis=1, keepdims=True))
    return finish(gi, output.dtype, 'channel_softmax_backward')


# Elementwise and concatenation

def ewise(op, a, b):
    a = check_tensor(a, f'{op} lhs')
    b = check_tensor(b, f'{op} rhs')
    _same_shape(a, b, op)
    dtype = np.result_type(a.dtype, b.dtype)
    if op == 'add':
        out = a.astype(np.float64) + b
    elif op == 'mul':
        out = a.astype(np.float64) * b
    else:
        raise ConfigurationError(f'unknown elementwise op {op!r}')
    return finish(out, dtype, op)


def ewise_backward(op, a, b, grad_output):
    """Return (grad_a, grad_b)."""
    _same_shape(a, b, op)
    _same_shape(a, grad_output, op)
    if op == 'add':
        return grad_output.astype(a.dtype), grad_output.astype(b.dtype)
    if op == 'mul':
        g = grad_output.astype(np.float64)
        return finish(g * b, a.dtype, 'mul_backward'), finish(g * a, b.dtype, 'mul_backward')
    raise ConfigurationError(f'unknown elementwise op {op!r}')


def concat_channels(tensors: Sequence[np.ndarray]):
    if not tensors:
        raise ConfigurationError('concat_channels: nothing to concatenate')
    tensors = [check_tensor(t, 'concat_channels input') for t in tensors]
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ConfigurationError(f'concat_channels: {t.shape} does not match {tensors[0].shape} in n, h, w')
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(grad_output, channel_counts: Sequence[int]):
    if sum(channel_counts) != grad_output.shape[1]:
        raise ConfigurationError(
            f'concat_channels_backward: counts {list(channel_counts)} do not sum to {grad_output.shape[1]}'
        )
    bounds = np.cumsum(channel_counts)[:-1]
    return np.split(grad_output, bounds, axis=1)


def accumulate(a, b):
    """Sum two gradients where ``None`` stands for zero."""
    if a is None:
        return b
    if b is None:
        return a
    return ewise('add', a, b)
