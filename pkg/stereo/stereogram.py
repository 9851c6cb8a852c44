"""
Synthetic layered stereograms with exact integer ground truth.

A scene is a background plane plus 3-6 fronto-parallel rectangles, each with
its own integer disparity and its own smoothed random texture. Rectangles are
placed in left-image coordinates; a rectangle with disparity d appears d
columns further left in the right image. Nearer (larger disparity) layers
are painted over farther ones.
"""
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageFilter

from .backbone import normalize_image
from .exceptions import ConfigurationError
from .regression import DisparityMap

logger = logging.getLogger(__name__)


@dataclass
class StereoSample:
    left: np.ndarray  # (H, W, 3) float32 in [0, 1]
    right: np.ndarray
    gt: DisparityMap

    @property
    def shape(self):
        return self.left.shape[:2]


@dataclass
class _Layer:
    disparity: int
    top: int
    bottom: int
    left: int
    right: int
    texture: np.ndarray  # (H, W + margin, 3), column 0 is x = -margin


def _texture(rng, h, w, blur_radius):
    noise = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    smoothed = Image.fromarray(noise).filter(ImageFilter.GaussianBlur(radius=blur_radius))
    return np.asarray(smoothed, dtype=np.float32) / 255.0


def _paint(layers, h, w, shift):
    """Index of the visible layer per pixel; ``shift`` moves each layer left by its disparity."""
    visible = np.zeros((h, w), dtype=np.int64)
    order = sorted(range(len(layers)), key=lambda k: (layers[k].disparity, k))
    for k in order:
        layer = layers[k]
        offset = layer.disparity if shift else 0
        x0 = max(layer.left - offset, 0)
        x1 = max(min(layer.right - offset, w), 0)
        visible[layer.top:layer.bottom, x0:x1] = k
    return visible


def gen_stereogram(seed, h, w, max_disparity, blur_radius=1.0):
    """
    Build one sample. Every valid left pixel satisfies
    ``left[y, x] == right[y, x - gt[y, x]]`` exactly.

    A left pixel is invalid when its match falls outside the right image or
    is hidden behind a nearer layer in the right view.
    """
    if h < 1 or w < 1:
        raise ConfigurationError(f'stereogram size must be positive, got {h}x{w}')
    if max_disparity < 0 or max_disparity >= w:
        raise ConfigurationError(f'max_disparity must be in [0, {w}), got {max_disparity}')
    rng = np.random.default_rng(seed)
    margin = max_disparity
    span = w + margin

    background = int(rng.integers(0, max(max_disparity // 2, 1))) if max_disparity else 0
    layers = [_Layer(background, 0, h, -margin, w + margin, _texture(rng, h, span, blur_radius))]
    for _ in range(int(rng.integers(3, 7))):
        rh = int(rng.integers(max(h // 6, 1), max(h // 2, 1) + 1))
        rw = int(rng.integers(max(w // 6, 1), max(w // 2, 1) + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        disparity = int(rng.integers(background, max_disparity)) if max_disparity > background else background
        layers.append(_Layer(disparity, top, top + rh, left, left + rw, _texture(rng, h, span, blur_radius)))

    in_left = _paint(layers, h, w, shift=False)
    in_right = _paint(layers, h, w, shift=True)
    disparities = np.array([layer.disparity for layer in layers])
    gt = disparities[in_left]

    rows, cols = np.indices((h, w))
    right = np.empty((h, w, 3), dtype=np.float32)
    left = np.empty((h, w, 3), dtype=np.float32)
    for k, layer in enumerate(layers):
        mask = in_right == k
        right[mask] = layer.texture[rows[mask], cols[mask] + margin]
        mask = in_left == k
        left[mask] = layer.texture[rows[mask], cols[mask] - gt[mask] + margin]

    source = cols - gt
    valid = source >= 0
    valid[valid] = in_right[rows[valid], source[valid]] == in_left[valid]
    return StereoSample(left=left, right=right, gt=DisparityMap(gt.astype(np.float32), valid))


def random_crop(sample: StereoSample, crop, rng):
    """Same window in both views; pixels whose match leaves the window become invalid."""
    ch, cw = crop
    h, w = sample.shape
    if ch > h or cw > w:
        raise ConfigurationError(f'crop {ch}x{cw} larger than sample {h}x{w}')
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    window = (slice(y, y + ch), slice(x, x + cw))
    gt = sample.gt.values[window]
    valid = sample.gt.valid[window] & (np.arange(cw)[None, :] - gt >= 0)
    return StereoSample(sample.left[window], sample.right[window], DisparityMap(gt, valid))


def make_dataset(count, seed, h, w, max_disparity):
    return [gen_stereogram(seed + i, h, w, max_disparity) for i in range(count)]


def stack_samples(samples):
    """Normalized (n, 3, H, W) left/right tensors and an (n, H, W) ground-truth map."""
    left = np.concatenate([normalize_image(s.left) for s in samples])
    right = np.concatenate([normalize_image(s.right) for s in samples])
    gt = DisparityMap(
        np.stack([s.gt.values for s in samples]),
        np.stack([s.gt.valid for s in samples]),
    )
    return left, right, gt
