"""
2-D cost aggregation over a volume whose channels are disparity hypotheses.

Encoder: inverted-residual stacks at 1/4, 1/8 and 1/16 scale, each followed
by multi-scale convolutional attention (MSCA) computed from the left-image
features of the same scale. Stride-2 inverted residuals move between scales.
Decoder: two upsampling levels back to 1/4 scale, each adding the encoder
output of that scale and refining it with one inverted residual.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor_ops as ops
from .backbone import FeaturePyramid
from .exceptions import ConfigurationError
from .layers import Conv2d, ConvBNAct, InvertedResidual, Module, Sequential

logger = logging.getLogger(__name__)

STRIP_KERNELS = (7, 11, 21)


@dataclass(frozen=True)
class AggregationConfig:
    blocks: Tuple[int, int, int] = (4, 8, 14)
    expansion: Tuple[int, int, int] = (4, 4, 4)
    channels: Tuple[int, int, int] = (48, 96, 192)
    use_msca: bool = True

    @classmethod
    def for_disparity(cls, max_disparity, blocks, expansion, use_msca=True):
        """Width plan (D/4, D/2, D)."""
        return cls(
            blocks=tuple(blocks),
            expansion=tuple(expansion),
            channels=(max_disparity // 4, max_disparity // 2, max_disparity),
            use_msca=use_msca,
        )

    def validate(self, max_disparity=None):
        for field in ('blocks', 'expansion', 'channels'):
            values = getattr(self, field)
            if len(values) != 3 or min(values) < 1:
                raise ConfigurationError(f'aggregation {field} must be three counts >= 1, got {values}')
        if max_disparity is not None and self.channels[0] != max_disparity // 4:
            raise ConfigurationError(
                f'aggregation c4={self.channels[0]} must equal max_disparity/4={max_disparity // 4}'
            )
        return self


class Msca(Module):
    """
    Multi-scale convolutional attention.

    Depthwise 1x1 plus k x 1 -> 1 x k strip pairs over the image feature,
    concatenated and mixed by a 1x1 convolution to the cost width. The result
    multiplies the cost feature directly.
    """

    def __init__(self, image_channels, cost_channels, rng):
        super().__init__()
        c = image_channels
        self.point = Conv2d(c, c, 1, rng, groups=c, bias=True)
        self.strips = []
        for k in STRIP_KERNELS:
            pair = Sequential(
                Conv2d(c, c, (k, 1), rng, groups=c, bias=True),
                Conv2d(c, c, (1, k), rng, groups=c, bias=True),
            )
            setattr(self, f'strip{k}', pair)
            self.strips.append(pair)
        self.mixer = Conv2d(4 * c, cost_channels, 1, rng)
        self.image_channels = image_channels

    def branches(self):
        return [self.point, *self.strips]

    def attention(self, feature):
        return self.mixer(ops.concat_channels([branch(feature) for branch in self.branches()]))

    def forward(self, feature, cost):
        if feature.shape[0] != cost.shape[0] or feature.shape[2:] != cost.shape[2:]:
            raise ConfigurationError(f'msca: image feature {feature.shape} and cost {cost.shape} are not aligned')
        attention = self.attention(feature)
        self._save((cost, attention))
        return ops.ewise('mul', cost, attention)

    def backward(self, grad_output):
        """Return (grad_feature, grad_cost)."""
        cost, attention = self._saved()
        g_cost, g_attention = ops.ewise_backward('mul', cost, attention, grad_output)
        parts = ops.concat_channels_backward(self.mixer.backward(g_attention), [self.image_channels] * 4)
        g_feature = None
        for branch, g in zip(self.branches(), parts):
            g_feature = ops.accumulate(g_feature, branch.backward(g))
        return g_feature, g_cost

    def trace(self, tracer, feature_shape, cost_shape, name):
        cat = None
        for key, branch in [('point', self.point)] + [(f'strip{k}', s) for k, s in zip(STRIP_KERNELS, self.strips)]:
            out = branch.trace(tracer, feature_shape, f'{name}.{key}')
            cat = out if cat is None else (cat[0], cat[1] + out[1], cat[2], cat[3])
        out = self.mixer.trace(tracer, cat, f'{name}.mixer')
        tracer.record(f'{name}.excite', elementwise=int(np.prod(cost_shape)))
        return cost_shape


class UpsampleFuse(Module):
    """Upsample x2, project to the skip width, add the skip, refine with one inverted residual."""

    def __init__(self, deep_channels, skip_channels, expansion, rng):
        super().__init__()
        self.project = ConvBNAct(deep_channels, skip_channels, 1, rng, act=False)
        self.fuse = InvertedResidual(skip_channels, skip_channels, rng, expansion=expansion)

    def forward(self, deep, skip):
        self._save(deep.shape)
        up = ops.bilinear_resize(deep, skip.shape[2], skip.shape[3])
        return self.fuse(ops.ewise('add', self.project(up), skip))

    def backward(self, grad_output):
        deep_shape = self._saved()
        g_sum = self.fuse.backward(grad_output)
        g_up = self.project.backward(g_sum)
        return ops.bilinear_resize_backward(g_up, deep_shape[2], deep_shape[3]), g_sum

    def trace(self, tracer, deep_shape, skip_shape, name):
        up = (deep_shape[0], deep_shape[1], skip_shape[2], skip_shape[3])
        tracer.record(f'{name}.upsample', elementwise=int(np.prod(up)))
        shape = self.project.trace(tracer, up, f'{name}.project')
        tracer.record(f'{name}.skip_add', elementwise=int(np.prod(shape)))
        return self.fuse.trace(tracer, shape, f'{name}.fuse')


def _stack(channels, count, expansion, rng):
    return Sequential(*(InvertedResidual(channels, channels, rng, expansion=expansion) for _ in range(count)))


class CostAggregator(Module):
    def __init__(self, config: AggregationConfig, image_channels, rng):
        super().__init__()
        config.validate()
        self.config = config
        self.image_channels = tuple(image_channels)
        c4, c8, c16 = config.channels
        b4, b8, b16 = config.blocks
        t4, t8, t16 = config.expansion
        i4, i8, i16 = self.image_channels

        self.enc4 = _stack(c4, b4, t4, rng)
        if config.use_msca:
            self.msca4 = Msca(i4, c4, rng)
        self.down8 = InvertedResidual(c4, c8, rng, stride=2, expansion=t8)
        self.enc8 = _stack(c8, b8, t8, rng)
        if config.use_msca:
            self.msca8 = Msca(i8, c8, rng)
        self.down16 = InvertedResidual(c8, c16, rng, stride=2, expansion=t16)
        self.enc16 = _stack(c16, b16, t16, rng)
        if config.use_msca:
            self.msca16 = Msca(i16, c16, rng)
        self.up8 = UpsampleFuse(c16, c8, t8, rng)
        self.up4 = UpsampleFuse(c8, c4, t4, rng)

    def check_inputs(self, volume, pyramid: FeaturePyramid):
        n, c, h, w = volume.shape
        if c != self.config.channels[0]:
            raise ConfigurationError(f'cost volume has {c} channels, aggregator expects {self.config.channels[0]}')
        expected = {
            'f4': (self.image_channels[0], h, w),
            'f8': (self.image_channels[1], (h + 1) // 2, (w + 1) // 2),
            'f16': (self.image_channels[2], (h + 3) // 4, (w + 3) // 4),
        }
        if not self.config.use_msca:
            return
        for key, (channels, fh, fw) in expected.items():
            feature = getattr(pyramid, key)
            if feature is None or feature.shape != (n, channels, fh, fw):
                got = None if feature is None else feature.shape
                raise ConfigurationError(f'pyramid {key} is {got}, expected {(n, channels, fh, fw)}')

    def _attend(self, name, feature, cost):
        if not self.config.use_msca:
            return cost
        return getattr(self, name)(feature, cost)

    def _attend_backward(self, name, grad):
        if not self.config.use_msca:
            return None, grad
        return getattr(self, name).backward(grad)

    def forward(self, volume, pyramid: FeaturePyramid):
        volume = ops.check_tensor(volume, 'cost volume')
        self.check_inputs(volume, pyramid)
        a4 = self._attend('msca4', pyramid.f4, self.enc4(volume))
        a8 = self._attend('msca8', pyramid.f8, self.enc8(self.down8(a4)))
        a16 = self._attend('msca16', pyramid.f16, self.enc16(self.down16(a8)))
        return self.up4(self.up8(a16, a8), a4)

    def backward(self, grad_output):
        """Return (grad_volume, FeaturePyramid of grads for f4/f8/f16)."""
        g_u8, g_a4 = self.up4.backward(grad_output)
        g_a16, g_a8 = self.up8.backward(g_u8)
        g_f16, g_x16 = self._attend_backward('msca16', g_a16)
        g_a8 = ops.accumulate(g_a8, self.down16.backward(self.enc16.backward(g_x16)))
        g_f8, g_x8 = self._attend_backward('msca8', g_a8)
        g_a4 = ops.accumulate(g_a4, self.down8.backward(self.enc8.backward(g_x8)))
        g_f4, g_x4 = self._attend_backward('msca4', g_a4)
        return self.enc4.backward(g_x4), FeaturePyramid(f4=g_f4, f8=g_f8, f16=g_f16)

    def trace(self, tracer, shape, pyramid_shapes: FeaturePyramid, name='aggregation'):
        x4 = self.enc4.trace(tracer, shape, f'{name}.enc4')
        if self.config.use_msca:
            x4 = self.msca4.trace(tracer, pyramid_shapes.f4, x4, f'{name}.msca4')
        x8 = self.down8.trace(tracer, x4, f'{name}.down8')
        x8 = self.enc8.trace(tracer, x8, f'{name}.enc8')
        if self.config.use_msca:
            x8 = self.msca8.trace(tracer, pyramid_shapes.f8, x8, f'{name}.msca8')
        x16 = self.down16.trace(tracer, x8, f'{name}.down16')
        x16 = self.enc16.trace(tracer, x16, f'{name}.enc16')
        if self.config.use_msca:
            x16 = self.msca16.trace(tracer, pyramid_shapes.f16, x16, f'{name}.msca16')
        u8 = self.up8.trace(tracer, x16, x8, f'{name}.up8')
        return self.up4.trace(tracer, u8, x4, f'{name}.up4')


def build_aggregator(config: AggregationConfig, image_channels, seed=0, rng=None):
    rng = rng if rng is not None else np.random.default_rng(seed)
    return CostAggregator(config, image_channels, rng)


def inverted_residual(x, params: InvertedResidual):
    """Expand, depthwise, linear project; adds ``x`` back when the block keeps its shape."""
    x = ops.check_tensor(x, 'inverted residual input')
    if x.shape[1] != params.in_channels:
        raise ConfigurationError(f'input has {x.shape[1]} channels, block expects {params.in_channels}')
    return params(x)


def msca(left_feature, cost_feature, params: Msca):
    left_feature = ops.check_tensor(left_feature, 'msca image feature')
    cost_feature = ops.check_tensor(cost_feature, 'msca cost feature')
    return params(left_feature, cost_feature)


def aggregate(volume, left_pyramid: FeaturePyramid, config: AggregationConfig, weights: CostAggregator):
    if weights.config != config:
        raise ConfigurationError(f'aggregator was built for {weights.config}, not {config}')
    data = getattr(volume, 'data', volume)
    return weights(data, left_pyramid)
