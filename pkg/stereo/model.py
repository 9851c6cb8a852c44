"""
Full stereo network: feature extraction, cost computation, cost aggregation
and disparity regression, plus the S/M/L variant table.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ops as ops
from .aggregation import AggregationConfig, CostAggregator
from .backbone import Backbone, BackboneConfig, FeaturePyramid, normalize_image
from .cost_volume import (
    build_correlation_volume, check_max_disparity, correlation_backward, trace_correlation,
)
from .exceptions import ConfigurationError
from .layers import Module
from .regression import (
    soft_argmax, soft_argmax_backward, trace_regression, upsample_disparity, upsample_disparity_backward,
)

logger = logging.getLogger(__name__)

# variant -> (blocks, expansion) of the aggregator
VARIANTS = {
    'S': ((1, 2, 4), (4, 4, 4)),
    'M': ((4, 8, 14), (4, 4, 4)),
    'L': ((8, 16, 32), (8, 8, 8)),
}

STAGES = ('feature_extraction', 'cost', 'cost_aggregation', 'disparity_regression')


@dataclass(frozen=True)
class ModelConfig:
    variant: str = 'M'
    max_disparity: int = 192
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)

    @classmethod
    def for_variant(cls, variant, max_disparity=192, use_msca=True, backbone=None):
        variant = variant.upper()
        if variant not in VARIANTS:
            raise ConfigurationError(f'unknown variant {variant!r}; choose one of {", ".join(VARIANTS)}')
        blocks, expansion = VARIANTS[variant]
        return cls(
            variant=variant,
            max_disparity=max_disparity,
            backbone=backbone or BackboneConfig(),
            aggregation=AggregationConfig.for_disparity(max_disparity, blocks, expansion, use_msca),
        ).validate()

    @classmethod
    def custom(cls, blocks, expansion, max_disparity=192, use_msca=True, backbone=None):
        """Any aggregator depth/expansion, e.g. blocks (2, 4, 8) or expansion (16, 16, 16)."""
        return cls(
            variant='custom',
            max_disparity=max_disparity,
            backbone=backbone or BackboneConfig(),
            aggregation=AggregationConfig.for_disparity(max_disparity, blocks, expansion, use_msca),
        ).validate()

    def validate(self):
        check_max_disparity(self.max_disparity)
        self.backbone.validate()
        self.aggregation.validate(self.max_disparity)
        if self.variant != 'custom':
            if self.variant not in VARIANTS:
                raise ConfigurationError(f'unknown variant {self.variant!r}')
            blocks, expansion = VARIANTS[self.variant]
            if self.aggregation.blocks != blocks or self.aggregation.expansion != expansion:
                raise ConfigurationError(
                    f'variant {self.variant} requires blocks {blocks} and expansion {expansion}, '
                    f'got {self.aggregation.blocks} and {self.aggregation.expansion}; use variant "custom"'
                )
        return self

    def without_msca(self):
        return replace(self, variant='custom', aggregation=replace(self.aggregation, use_msca=False))


def _with_right(left_grad, right_grad=None):
    """Stack left and right gradients along the batch axis; a missing right gradient is zero."""
    if left_grad is None:
        return None
    if right_grad is None:
        right_grad = np.zeros_like(left_grad)
    return np.concatenate([left_grad, right_grad], axis=0)


class LightStereo(Module):
    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Backbone(config.backbone, rng)
        self.aggregator = CostAggregator(config.aggregation, tuple(reversed(config.backbone.decoder_channels)), rng)

    @property
    def max_disparity(self):
        return self.config.max_disparity

    # Stages

    def extract(self, left, right):
        """Both views go through the backbone as one batch; returns (left, right) pyramids."""
        n = left.shape[0]
        pyramid = self.backbone(np.concatenate([left, right], axis=0))
        return pyramid.split(n)

    def cost(self, left_f4, right_f4):
        return build_correlation_volume(left_f4, right_f4, self.max_disparity).data

    def aggregate(self, volume, left_pyramid):
        return self.aggregator(volume, left_pyramid)

    def regress(self, costs, height, width):
        return upsample_disparity(soft_argmax(costs), height, width, keep_batch=True)

    def forward(self, left, right):
        left = ops.check_tensor(left, 'left image')
        right = ops.check_tensor(right, 'right image')
        if left.shape != right.shape:
            raise ConfigurationError(f'left image {left.shape} and right image {right.shape} differ in size')
        height, width = left.shape[2:]
        left_pyramid, right_pyramid = self.extract(left, right)
        volume = self.cost(left_pyramid.f4, right_pyramid.f4)
        costs = self.aggregate(volume, left_pyramid)
        self._save((costs, left_pyramid.f4, right_pyramid.f4))
        return self.regress(costs, height, width)

    def backward(self, grad_disparity):
        """Backpropagate d loss / d full-resolution disparity through the whole graph."""
        costs, left_f4, right_f4 = self._saved()
        g_quarter = upsample_disparity_backward(grad_disparity, costs.shape[2], costs.shape[3])
        g_costs = soft_argmax_backward(costs, g_quarter)
        g_volume, g_left = self.aggregator.backward(g_costs)
        g_left4, g_right4 = correlation_backward(left_f4, right_f4, g_volume)
        g_left.f4 = ops.accumulate(g_left.f4, g_left4)

        grads = FeaturePyramid(
            f4=_with_right(g_left.f4, g_right4),
            f8=_with_right(g_left.f8),
            f16=_with_right(g_left.f16),
        )
        return self.backbone.backward(grads)

    def trace(self, tracer, height, width, batch=1):
        """Record every layer under its pipeline stage for a (batch, 3, height, width) pair."""
        if height % 32 or width % 32:
            raise ConfigurationError(f'input size {height}x{width} must be divisible by 32')
        tracer.stage = 'feature_extraction'
        pyramid = self.backbone.trace(tracer, (2 * batch, 3, height, width))
        left = FeaturePyramid(*(None if s is None else (batch, *s[1:]) for s in
                                (pyramid.f4, pyramid.f8, pyramid.f16, pyramid.raw32)))
        tracer.stage = 'cost'
        volume = trace_correlation(tracer, left.f4, self.max_disparity)
        tracer.stage = 'cost_aggregation'
        costs = self.aggregator.trace(tracer, volume, left)
        tracer.stage = 'disparity_regression'
        return trace_regression(tracer, costs, height, width)


def build_model(config: ModelConfig = None, seed=0):
    """Build a model in eval mode with weights drawn deterministically from ``seed``."""
    config = (config or ModelConfig.for_variant('M')).validate()
    model = LightStereo(config, np.random.default_rng(seed))
    logger.info('built LightStereo-%s (D=%d): %d parameters', config.variant, config.max_disparity,
                model.num_parameters())
    return model.eval()


def pad_to_multiple(image, multiple=32):
    """Reflect-pad an (H, W, C) image on the bottom/right; returns (padded, (H, W))."""
    h, w = image.shape[:2]
    ph = -h % multiple
    pw = -w % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode='reflect' if ph < h and pw < w else 'symmetric')
    return image, (h, w)


def infer(model: LightStereo, left, right):
    """
    Disparity map for one rectified pair.

    ``left``/``right`` are (H, W, 3) RGB images (uint8 or floats in [0, 1]) with
    H and W divisible by 32, or already-normalized (n, 3, H, W) tensors.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise ConfigurationError(f'left image is {left.shape[:2]} but right image is {right.shape[:2]}')
    if model.training or model.retain:
        raise ConfigurationError('infer needs a model in eval mode')
    if left.ndim == 3:
        left = normalize_image(left)
        right = normalize_image(right)
    disparity = model(left, right)
    return disparity[0] if disparity.shape[0] == 1 else disparity
