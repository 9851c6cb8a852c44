"""
Central finite-difference checks of every backward pass, in float64.

Single kernels are checked element by element with step 1e-3 against a
random linear functional of their output. Composite blocks and the whole
network are checked along random directions with step 1e-6, since ReLU6
kinks make wide steps unreliable once many activations are involved.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor_ops as ops
from .aggregation import AggregationConfig, CostAggregator, Msca
from .backbone import BackboneConfig, FeaturePyramid
from .cost_volume import build_correlation_volume, correlation_backward
from .layers import NORMED_INIT_GAIN, ConvBNAct, InvertedResidual
from .model import LightStereo, ModelConfig
from .regression import DisparityMap, soft_argmax, soft_argmax_backward, upsample_disparity, upsample_disparity_backward
from .training import smooth_l1_loss, smooth_l1_loss_backward

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
OP_STEP = 1e-3
COMPOSITE_STEP = 1e-6


@dataclass
class GradcheckResult:
    name: str
    max_relative_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_relative_error < self.tolerance


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(f, x, eps=OP_STEP):
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = f()
        flat[i] = orig - eps
        minus = f()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def _away_from(x, points, margin):
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin)
    return x


def _check(name, f, inputs, analytic, eps=OP_STEP):
    """Compare ``analytic`` (one gradient per input) with numeric gradients of ``f``."""
    worst = 0.0
    for x, g in zip(inputs, analytic):
        worst = max(worst, relative_error(g, numeric_gradient(f, x, eps)))
    return GradcheckResult(name, worst)


def _linear_check(name, forward, backward, inputs, rng, eps=OP_STEP):
    """Check ``backward`` on the scalar <forward(*inputs), r> for a random r."""
    cotangent = rng.standard_normal(np.shape(forward(*inputs)))
    analytic = backward(*inputs, cotangent)
    return _check(name, lambda: float((forward(*inputs) * cotangent).sum()), inputs, analytic, eps)


def check_ops(seed=0):
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal
    results = []

    def conv_case(name, x_shape, w_shape, stride, padding, groups, bias=True):
        x = normal(x_shape)
        w = normal(w_shape)
        b = normal(w_shape[0]) if bias else None

        def params():
            return ops.ConvParams(w, b, stride, padding, groups)

        def forward(x, w, *rest):
            return ops.conv2d(x, params())

        def backward(x, w, *rest):
            cotangent = rest[-1]
            gi, gw, gb = ops.conv2d_backward(x, params(), cotangent)
            return (gi, gw, gb) if bias else (gi, gw)

        inputs = (x, w, b) if bias else (x, w)
        results.append(_linear_check(name, forward, backward, inputs, rng))

    conv_case('conv2d', (2, 2, 6, 6), (3, 2, 3, 3), (2, 2), (1, 1), 1)
    conv_case('conv2d_grouped', (1, 4, 5, 6), (4, 2, 3, 3), (1, 1), (1, 1), 2)
    conv_case('conv2d_depthwise', (2, 4, 6, 6), (4, 1, 3, 3), (2, 2), (1, 1), 4, bias=False)
    conv_case('conv2d_strip', (1, 3, 6, 6), (3, 1, 1, 5), (1, 1), (0, 2), 3)

    x = _away_from(rng.uniform(-2, 8, (2, 3, 4, 5)), (0.0, 6.0), 0.05)
    results.append(_linear_check('relu6', lambda x: ops.relu6(x), lambda x, g: (ops.relu6_backward(x, g),),
                                 (x,), rng))

    for training in (True, False):
        x = normal((2, 3, 4, 4))
        gamma = normal(3)
        beta = normal(3)
        running_mean = normal(3)
        running_var = rng.uniform(0.5, 2.0, 3)

        def bn(gamma, beta):
            return ops.BatchNormParams(gamma, beta, running_mean.copy(), running_var.copy())

        results.append(_linear_check(
            f'batch_norm_{"train" if training else "eval"}',
            lambda x, gamma, beta: ops.batch_norm(x, bn(gamma, beta), training),
            lambda x, gamma, beta, g: ops.batch_norm_backward(x, bn(gamma, beta), g, training),
            (x, gamma, beta), rng,
        ))

    x = normal((1, 2, 3, 5))
    results.append(_linear_check(
        'bilinear_resize',
        lambda x: ops.bilinear_resize(x, 6, 10),
        lambda x, g: (ops.bilinear_resize_backward(g, 3, 5),),
        (x,), rng,
    ))
    results.append(_linear_check(
        'channel_softmax',
        lambda x: ops.channel_softmax(x),
        lambda x, g: (ops.channel_softmax_backward(ops.channel_softmax(x), g),),
        (normal((2, 4, 3, 3)),), rng,
    ))
    for op in ('add', 'mul'):
        results.append(_linear_check(
            op,
            lambda a, b, op=op: ops.ewise(op, a, b),
            lambda a, b, g, op=op: ops.ewise_backward(op, a, b, g),
            (normal((2, 3, 4, 4)), normal((2, 3, 4, 4))), rng,
        ))
    results.append(_linear_check(
        'concat_channels',
        lambda a, b: ops.concat_channels([a, b]),
        lambda a, b, g: ops.concat_channels_backward(g, [2, 3]),
        (normal((1, 2, 3, 3)), normal((1, 3, 3, 3))), rng,
    ))
    results.append(_linear_check(
        'correlation',
        lambda left, right: build_correlation_volume(left, right, 16).data,
        lambda left, right, g: correlation_backward(left, right, g),
        (normal((2, 3, 4, 6)), normal((2, 3, 4, 6))), rng,
    ))
    results.append(_linear_check(
        'soft_argmax',
        lambda c: soft_argmax(c),
        lambda c, g: (soft_argmax_backward(c, g),),
        (normal((2, 6, 3, 3)),), rng,
    ))
    results.append(_linear_check(
        'upsample_disparity',
        lambda q: upsample_disparity(q, 8, 12, keep_batch=True).values,
        lambda q, g: (upsample_disparity_backward(g, 2, 3),),
        (rng.uniform(0, 5, (2, 1, 2, 3)),), rng,
    ))

    gt = rng.uniform(0, 10, (3, 5))
    valid = rng.random((3, 5)) > 0.3
    valid[0, 0] = True
    residual = _away_from(rng.uniform(-3, 3, (3, 5)), (-1.0, 1.0), 0.05)
    pred = gt + residual

    def loss():
        return smooth_l1_loss(DisparityMap(pred, valid), DisparityMap(gt, valid))

    analytic = smooth_l1_loss_backward(DisparityMap(pred, valid), DisparityMap(gt, valid))
    results.append(_check('smooth_l1_loss', loss, (pred,), (analytic,)))
    return results


# Composite graphs

def _directional(name, module, run, backward, inputs, rng, eps=COMPOSITE_STEP):
    """
    Directional derivative along one random direction over all inputs and
    all parameters at once.

    ``run()`` returns the scalar objective; ``backward()`` runs the analytic
    pass and returns the input gradients.
    """
    params = [p for _, p in module.named_parameters()]
    grads = dict(module.named_gradients())
    grads = [grads[n] for n, _ in module.named_parameters()]
    tensors = list(inputs) + params
    directions = [rng.standard_normal(t.shape) for t in tensors]

    module.zero_grad()
    run()
    input_grads = backward()
    analytic = sum(float((g * v).sum()) for g, v in zip(list(input_grads) + grads, directions))

    for t, v in zip(tensors, directions):
        t += eps * v
    plus = run()
    for t, v in zip(tensors, directions):
        t -= 2 * eps * v
    minus = run()
    for t, v in zip(tensors, directions):
        t += eps * v
    numeric = (plus - minus) / (2 * eps)
    return GradcheckResult(name, relative_error(analytic, numeric))


def _prepare(module):
    """
    float64 copy in eval mode (running statistics) with forward caches kept.

    Convolutions ahead of a norm go back to the plain fan-in scale, since
    eval-mode norms divide by the running variance rather than the batch one.
    """
    module.to_dtype(np.float64)
    for _, m in module.modules():
        if isinstance(m, ConvBNAct):
            m.conv._params['weight'] /= NORMED_INIT_GAIN
    return module.eval().requires_grad_()


def _randomize_norms(module, rng):
    for prefix, m in module.modules():
        if 'running_var' in m._buffers:
            m._buffers['running_mean'][...] = rng.normal(0, 0.1, m._buffers['running_mean'].shape)
            m._buffers['running_var'][...] = rng.uniform(0.5, 1.5, m._buffers['running_var'].shape)
            m._params['beta'][...] = rng.normal(0, 0.1, m._params['beta'].shape)


def check_inverted_residual(seed=0):
    rng = np.random.default_rng(seed)
    block = _prepare(InvertedResidual(4, 4, rng, expansion=2))
    _randomize_norms(block, rng)
    x = rng.standard_normal((2, 4, 5, 6))
    cotangent = rng.standard_normal((2, 4, 5, 6))
    return _directional(
        'inverted_residual', block,
        lambda: float((block(x) * cotangent).sum()),
        lambda: (block.backward(cotangent),),
        (x,), rng,
    )


def check_msca(seed=0):
    rng = np.random.default_rng(seed)
    attention = _prepare(Msca(3, 4, rng))
    feature = rng.standard_normal((1, 3, 6, 8))
    cost = rng.standard_normal((1, 4, 6, 8))
    cotangent = rng.standard_normal((1, 4, 6, 8))
    return _directional(
        'msca', attention,
        lambda: float((attention(feature, cost) * cotangent).sum()),
        lambda: attention.backward(cotangent),
        (feature, cost), rng,
    )


def check_aggregator(seed=0):
    """One block per scale over a (1, 8, 8, 12) volume."""
    rng = np.random.default_rng(seed)
    config = AggregationConfig(blocks=(1, 1, 1), expansion=(2, 2, 2), channels=(8, 16, 32))
    aggregator = _prepare(CostAggregator(config, (4, 4, 4), rng))
    _randomize_norms(aggregator, rng)
    volume = rng.standard_normal((1, 8, 8, 12))
    pyramid = FeaturePyramid(
        f4=rng.standard_normal((1, 4, 8, 12)),
        f8=rng.standard_normal((1, 4, 4, 6)),
        f16=rng.standard_normal((1, 4, 2, 3)),
    )
    cotangent = rng.standard_normal((1, 8, 8, 12))

    def backward():
        g_volume, g_pyramid = aggregator.backward(cotangent)
        return g_volume, g_pyramid.f4, g_pyramid.f8, g_pyramid.f16

    return _directional(
        'aggregator', aggregator,
        lambda: float((aggregator(volume, pyramid) * cotangent).sum()),
        backward,
        (volume, pyramid.f4, pyramid.f8, pyramid.f16), rng,
    )


def tiny_model_config():
    """One block per scale everywhere, narrow widths, D = 16."""
    backbone = BackboneConfig(
        stage_channels=(8, 8, 16, 16),
        stage_block_counts=(1, 1, 1, 1),
        expansion=2,
        decoder_channels=(16, 8, 8),
        stem_channels=8,
    )
    return ModelConfig.custom((1, 1, 1), (2, 2, 2), max_disparity=16, backbone=backbone)


def check_model(seed=0):
    rng = np.random.default_rng(seed)
    model = _prepare(LightStereo(tiny_model_config(), rng))
    _randomize_norms(model, rng)
    left = rng.standard_normal((1, 3, 32, 64))
    right = rng.standard_normal((1, 3, 32, 64))
    cotangent = rng.standard_normal((1, 32, 64))

    def backward():
        g_images = model.backward(cotangent)
        return g_images[:1], g_images[1:]

    return _directional(
        'model', model,
        lambda: float((model(left, right).values * cotangent).sum()),
        backward,
        (left, right), rng,
    )


def run_suite(seed=0, include_model=True):
    results = check_ops(seed)
    results += [check_inverted_residual(seed), check_msca(seed), check_aggregator(seed)]
    if include_model:
        results.append(check_model(seed))
    for r in results:
        logger.debug('gradcheck %s: %.3e', r.name, r.max_relative_error)
    return results
