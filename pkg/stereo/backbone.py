"""
MobileNetV2-style feature extractor with an upsampling decoder.

The encoder produces features at strides 4, 8, 16 and 32. Three decoder
levels walk back up to stride 4, each fusing the upsampled deeper feature
with the encoder skip at that scale.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor_ops as ops
from .exceptions import ConfigurationError
from .layers import ConvBNAct, InvertedResidual, Module, Sequential

logger = logging.getLogger(__name__)

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


def normalize_image(image):
    """(H, W, 3) RGB in [0, 1] or uint8 -> standardized (1, 3, H, W) float32 tensor."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f'expected an (H, W, 3) RGB image, got shape {image.shape}')
    if np.issubdtype(image.dtype, np.integer):
        image = image.astype(np.float32) / np.iinfo(image.dtype).max
    mean = np.asarray(IMAGE_MEAN, dtype=np.float32)
    std = np.asarray(IMAGE_STD, dtype=np.float32)
    x = (image.astype(np.float32) - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: Tuple[int, int, int, int] = (24, 32, 96, 160)
    stage_block_counts: Tuple[int, int, int, int] = (2, 3, 4, 7)
    expansion: int = 4
    decoder_channels: Tuple[int, int, int] = (96, 64, 48)
    input_channels: int = 3
    stem_channels: int = 16

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.stage_block_counts) != 4:
            raise ConfigurationError('backbone needs exactly four stages')
        if len(self.decoder_channels) != 3:
            raise ConfigurationError('backbone decoder needs exactly three levels')
        counts = (*self.stage_channels, *self.stage_block_counts, *self.decoder_channels,
                  self.expansion, self.input_channels, self.stem_channels)
        if min(counts) < 1:
            raise ConfigurationError(f'backbone counts must all be >= 1: {self}')
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigurationError(f'stage_channels must be nondecreasing: {self.stage_channels}')
        return self


@dataclass
class FeaturePyramid:
    f4: Optional[np.ndarray] = None
    f8: Optional[np.ndarray] = None
    f16: Optional[np.ndarray] = None
    raw32: Optional[np.ndarray] = None

    def split(self, n):
        """Split along the batch axis into the first ``n`` samples and the rest."""
        head = FeaturePyramid(*(t[:n] for t in (self.f4, self.f8, self.f16, self.raw32)))
        tail = FeaturePyramid(*(t[n:] for t in (self.f4, self.f8, self.f16, self.raw32)))
        return head, tail


class DecoderLevel(Module):
    """Upsample x2, project to the skip width, add the skip, then dw 3x3 + pw 1x1."""

    def __init__(self, deep_channels, skip_channels, out_channels, rng):
        super().__init__()
        self.project = ConvBNAct(deep_channels, skip_channels, 1, rng, act=False)
        self.fuse_dw = ConvBNAct(skip_channels, skip_channels, 3, rng, groups=skip_channels)
        self.fuse_pw = ConvBNAct(skip_channels, out_channels, 1, rng)

    def forward(self, deep, skip):
        self._save(deep.shape)
        up = ops.bilinear_resize(deep, skip.shape[2], skip.shape[3])
        fused = ops.ewise('add', self.project(up), skip)
        return self.fuse_pw(self.fuse_dw(fused))

    def backward(self, grad_output):
        deep_shape = self._saved()
        g_fused = self.fuse_dw.backward(self.fuse_pw.backward(grad_output))
        g_up = self.project.backward(g_fused)
        g_deep = ops.bilinear_resize_backward(g_up, deep_shape[2], deep_shape[3])
        return g_deep, g_fused

    def trace(self, tracer, deep_shape, skip_shape, name):
        up = (deep_shape[0], deep_shape[1], skip_shape[2], skip_shape[3])
        tracer.record(f'{name}.upsample', elementwise=int(np.prod(up)))
        shape = self.project.trace(tracer, up, f'{name}.project')
        tracer.record(f'{name}.skip_add', elementwise=int(np.prod(shape)))
        shape = self.fuse_dw.trace(tracer, shape, f'{name}.fuse_dw')
        return self.fuse_pw.trace(tracer, shape, f'{name}.fuse_pw')


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng):
        super().__init__()
        config.validate()
        self.config = config
        stem = config.stem_channels
        self.stem = Sequential(
            ConvBNAct(config.input_channels, stem, 3, rng, stride=2),
            ConvBNAct(stem, stem, 3, rng),
        )
        cin = stem
        stages = []
        for c, count in zip(config.stage_channels, config.stage_block_counts):
            blocks = [InvertedResidual(cin, c, rng, stride=2, expansion=config.expansion)]
            blocks += [InvertedResidual(c, c, rng, expansion=config.expansion) for _ in range(count - 1)]
            stages.append(Sequential(*blocks))
            cin = c
        self.stage4, self.stage8, self.stage16, self.stage32 = stages

        c4, c8, c16, c32 = config.stage_channels
        d16, d8, d4 = config.decoder_channels
        self.decode16 = DecoderLevel(c32, c16, d16, rng)
        self.decode8 = DecoderLevel(d16, c8, d8, rng)
        self.decode4 = DecoderLevel(d8, c4, d4, rng)

    def forward(self, image):
        image = ops.check_tensor(image, 'image')
        n, c, h, w = image.shape
        if c != self.config.input_channels:
            raise ConfigurationError(f'image has {c} channels, backbone expects {self.config.input_channels}')
        if h % 32 or w % 32:
            raise ConfigurationError(f'image size {h}x{w} must be divisible by 32')
        e4 = self.stage4(self.stem(image))
        e8 = self.stage8(e4)
        e16 = self.stage16(e8)
        e32 = self.stage32(e16)
        f16 = self.decode16(e32, e16)
        f8 = self.decode8(f16, e8)
        f4 = self.decode4(f8, e4)
        return FeaturePyramid(f4=f4, f8=f8, f16=f16, raw32=e32)

    def backward(self, grads: FeaturePyramid):
        """Backpropagate per-scale feature gradients (``None`` entries count as zero) to the image."""
        g_f8, g_e4 = self.decode4.backward(grads.f4) if grads.f4 is not None else (None, None)
        g_f8 = ops.accumulate(grads.f8, g_f8)
        g_f16, g_e8 = self.decode8.backward(g_f8) if g_f8 is not None else (None, None)
        g_f16 = ops.accumulate(grads.f16, g_f16)
        g_e32, g_e16 = self.decode16.backward(g_f16) if g_f16 is not None else (None, None)
        g_e32 = ops.accumulate(grads.raw32, g_e32)
        if g_e32 is None:
            raise ConfigurationError('backbone backward needs at least one feature gradient')
        g_e16 = ops.accumulate(g_e16, self.stage32.backward(g_e32))
        g_e8 = ops.accumulate(g_e8, self.stage16.backward(g_e16))
        g_e4 = ops.accumulate(g_e4, self.stage8.backward(g_e8))
        return self.stem.backward(self.stage4.backward(g_e4))

    def trace(self, tracer, shape, name='backbone'):
        shape = self.stem.trace(tracer, shape, f'{name}.stem')
        e4 = self.stage4.trace(tracer, shape, f'{name}.stage4')
        e8 = self.stage8.trace(tracer, e4, f'{name}.stage8')
        e16 = self.stage16.trace(tracer, e8, f'{name}.stage16')
        e32 = self.stage32.trace(tracer, e16, f'{name}.stage32')
        f16 = self.decode16.trace(tracer, e32, e16, f'{name}.decode16')
        f8 = self.decode8.trace(tracer, f16, e8, f'{name}.decode8')
        f4 = self.decode4.trace(tracer, f8, e4, f'{name}.decode4')
        return FeaturePyramid(f4=f4, f8=f8, f16=f16, raw32=e32)


def build_backbone(config: BackboneConfig = None, seed=0, rng=None):
    """Construct a backbone with He-normal convolution weights drawn from ``seed``."""
    config = config or BackboneConfig()
    rng = rng if rng is not None else np.random.default_rng(seed)
    backbone = Backbone(config, rng)
    logger.debug('backbone built: %d parameters', backbone.num_parameters())
    return backbone


def extract_features(weights: Backbone, image):
    """Run the backbone on a normalized (n, 3, H, W) batch."""
    return weights(image)
