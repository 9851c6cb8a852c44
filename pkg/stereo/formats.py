"""
Image and disparity file formats.

* PFM: grayscale ``Pf`` only; negative scale means little-endian; rows are
  stored bottom-to-top.
* KITTI disparity PNG: 16-bit single channel, disparity = pixel / 256,
  pixel 0 marks an invalid pixel.
* Binary PGM (P5) / PPM (P6), 8 or 16 bit, and PNG images via Pillow.
* False-colour disparity visualisation with the KITTI devkit colour ramp.
"""
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import FormatError, UnsupportedFormatError
from .regression import DisparityMap

logger = logging.getLogger(__name__)

_WHITESPACE = b' \t\r\n\v\f'

# (r, g, b, relative width of the segment that starts at this colour)
DISPARITY_COLORMAP = np.array([
    [0, 0, 0, 114],
    [0, 0, 1, 185],
    [1, 0, 0, 114],
    [1, 0, 1, 174],
    [0, 1, 0, 114],
    [0, 1, 1, 185],
    [1, 1, 0, 114],
    [1, 1, 1, 0],
], dtype=np.float64)


class _Header:
    """Whitespace-separated header tokens of a Netpbm-style file, with byte offsets."""

    def __init__(self, data, path, comments=False):
        self.data = data
        self.path = path
        self.pos = 0
        self.comments = comments

    def _skip(self):
        data = self.data
        while self.pos < len(data):
            ch = data[self.pos:self.pos + 1]
            if ch in _WHITESPACE and ch:
                self.pos += 1
            elif self.comments and ch == b'#':
                while self.pos < len(data) and data[self.pos:self.pos + 1] not in (b'\n', b'\r'):
                    self.pos += 1
            else:
                break

    def token(self, what):
        self._skip()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1] not in _WHITESPACE:
            self.pos += 1
        if start == self.pos:
            raise FormatError(f'truncated header: missing {what}', self.path, start)
        return self.data[start:self.pos].decode('ascii', errors='replace'), start

    def integer(self, what, low=1, high=None):
        text, offset = self.token(what)
        try:
            value = int(text)
        except ValueError:
            raise FormatError(f'bad {what} {text!r}', self.path, offset) from None
        if value < low or (high is not None and value > high):
            raise FormatError(f'{what} {value} out of range', self.path, offset)
        return value

    def payload_start(self):
        """Exactly one whitespace byte separates the header from the raster."""
        if self.pos >= len(self.data) or self.data[self.pos:self.pos + 1] not in _WHITESPACE:
            raise FormatError('missing whitespace before raster data', self.path, self.pos)
        return self.pos + 1


def _raster(data, start, count, dtype, path):
    needed = count * np.dtype(dtype).itemsize
    if len(data) - start < needed:
        raise FormatError(f'truncated raster: need {needed} bytes, have {len(data) - start}', path, len(data))
    return np.frombuffer(data, dtype=dtype, count=count, offset=start)


# PFM

def read_pfm(path):
    """Return ``(values, (height, width))`` with values as top-to-bottom float32 rows."""
    data = Path(path).read_bytes()
    header = _Header(data, path)
    magic, _ = header.token('magic')
    if magic == 'PF':
        raise UnsupportedFormatError('colour PFM (PF) is not supported, only grayscale Pf', path, 0)
    if magic != 'Pf':
        raise FormatError(f'bad PFM magic {magic!r}', path, 0)
    width = header.integer('width')
    height = header.integer('height')
    text, offset = header.token('scale')
    try:
        scale = float(text)
    except ValueError:
        raise FormatError(f'bad PFM scale {text!r}', path, offset) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f'PFM scale must be finite and nonzero, got {text!r}', path, offset)
    dtype = '<f4' if scale < 0 else '>f4'
    raster = _raster(data, header.payload_start(), width * height, dtype, path)
    values = raster.reshape(height, width)[::-1].astype(np.float32)
    return values, (height, width)


def write_pfm(path, values, scale=-1.0):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise FormatError(f'PFM holds a 2-D map, got shape {values.shape}', path)
    if scale == 0:
        raise FormatError('PFM scale must be nonzero', path)
    height, width = values.shape
    dtype = '<f4' if scale < 0 else '>f4'
    header = f'Pf\n{width} {height}\n{float(scale)!r}\n'.encode('ascii')
    with open(path, 'wb') as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(values[::-1]).astype(dtype).tobytes())


# KITTI disparity PNG

_KITTI_MODES = ('I;16', 'I;16B', 'I;16L', 'I')


def _open_image(path):
    try:
        return Image.open(path)
    except UnidentifiedImageError as exc:
        raise FormatError(f'unrecognised image: {exc}', path) from exc


def read_kitti_disparity(path):
    with _open_image(path) as image:
        if image.mode not in _KITTI_MODES:
            raise UnsupportedFormatError(
                f'KITTI disparity must be a 16-bit single-channel PNG, got mode {image.mode}', path
            )
        pixels = np.asarray(image).astype(np.int64)
    if pixels.ndim != 2:
        raise UnsupportedFormatError(f'KITTI disparity must be single-channel, got shape {pixels.shape}', path)
    if pixels.min() < 0 or pixels.max() > 65535:
        raise FormatError('KITTI disparity pixels must fit in 16 bits', path)
    return DisparityMap((pixels / 256.0).astype(np.float32), pixels > 0)


def write_kitti_disparity(path, disparity: DisparityMap):
    """Valid pixels round to the nearest 1/256 px and clamp to [1, 65535]; invalid pixels are 0."""
    values = np.asarray(disparity.values, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError(f'KITTI disparity is a 2-D map, got shape {values.shape}', path)
    valid = disparity.valid & np.isfinite(values)
    pixels = np.zeros(values.shape, dtype=np.uint16)
    pixels[valid] = np.clip(np.rint(values[valid] * 256.0), 1, 65535).astype(np.uint16)
    Image.fromarray(pixels).save(path, format='PNG')


# Images

def _read_pnm(data, path):
    header = _Header(data, path, comments=True)
    magic, _ = header.token('magic')
    channels = {'P5': 1, 'P6': 3}.get(magic)
    if channels is None:
        raise UnsupportedFormatError(f'only binary PGM (P5) and PPM (P6) are supported, got {magic!r}', path, 0)
    width = header.integer('width')
    height = header.integer('height')
    maxval = header.integer('maxval', 1, 65535)
    dtype = np.uint8 if maxval < 256 else '>u2'
    raster = _raster(data, header.payload_start(), width * height * channels, dtype, path)
    image = raster.reshape(height, width, channels).astype(np.float32) / maxval
    if channels == 1:
        image = np.repeat(image, 3, axis=2)
    return image


def read_image(path):
    """(H, W, 3) float32 RGB in [0, 1] from P5/P6 Netpbm or any Pillow-readable file (PNG)."""
    data = Path(path).read_bytes()
    if data[:2] in (b'P5', b'P6', b'P1', b'P2', b'P3', b'P4'):
        return _read_pnm(data, path)
    with _open_image(path) as image:
        if image.mode in _KITTI_MODES:
            gray = np.asarray(image).astype(np.float32) / 65535.0
            return np.repeat(gray[:, :, None], 3, axis=2)
        return np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0


def write_pnm(path, image):
    """Binary PPM (3 channels) or PGM (2-D), from uint8 or uint16 arrays."""
    image = np.asarray(image)
    if image.dtype not in (np.uint8, np.uint16):
        raise FormatError(f'Netpbm output needs uint8 or uint16 pixels, got {image.dtype}', path)
    if image.ndim == 2:
        magic = 'P5'
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = 'P6'
    else:
        raise FormatError(f'cannot store shape {image.shape} as PGM/PPM', path)
    maxval = 255 if image.dtype == np.uint8 else 65535
    raster = image if image.dtype == np.uint8 else image.astype('>u2')
    with open(path, 'wb') as handle:
        handle.write(f'{magic}\n{image.shape[1]} {image.shape[0]}\n{maxval}\n'.encode('ascii'))
        handle.write(np.ascontiguousarray(raster).tobytes())


def write_png(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format='PNG')


# Visualisation

def colorize_disparity(disparity: DisparityMap, max_disparity):
    """
    Map [0, max_disparity - 1] linearly onto the colour ramp; invalid pixels are black.

    Returns an (H, W, 3) uint8 image.
    """
    values = np.asarray(disparity.values, dtype=np.float64)
    top = max(max_disparity - 1, 1)
    v = np.clip(values / top, 0.0, 1.0).ravel()

    widths = DISPARITY_COLORMAP[:-1, 3]
    edges = np.cumsum(widths) / widths.sum()
    starts = np.concatenate([[0.0], edges[:-1]])
    index = np.minimum(np.searchsorted(edges, v, side='right'), len(widths) - 1)
    t = (v - starts[index]) / (widths[index] / widths.sum())
    rgb = (DISPARITY_COLORMAP[index, :3] * (1 - t)[:, None] + DISPARITY_COLORMAP[index + 1, :3] * t[:, None])
    rgb = rgb.reshape(*values.shape, 3)
    rgb[~(disparity.valid & np.isfinite(values))] = 0
    return np.rint(rgb * 255).astype(np.uint8)
