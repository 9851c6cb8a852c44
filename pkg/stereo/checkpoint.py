"""
LSWT checkpoint format (version 1), all integers little-endian:

    b'LSWT' | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | u64 dim * rank | float32 payload
    u32 CRC-32 of every preceding byte
"""
import logging
import struct
import zlib
from collections import OrderedDict

import numpy as np

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'LSWT'
VERSION = 1


def encode_checkpoint(state):
    chunks = [MAGIC, struct.pack('<II', VERSION, len(state))]
    for name, value in state.items():
        value = np.asarray(value)
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype='<f4').tobytes())
    body = b''.join(chunks)
    return body + struct.pack('<I', zlib.crc32(body))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, size, what):
        if self.pos + size > len(self.data) - 4:
            raise CheckpointError(f'truncated checkpoint while reading {what}', self.path, self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data, path=None):
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError('file too short to be a checkpoint', path, len(data))
    if data[:4] != MAGIC:
        raise CheckpointError(f'bad magic {data[:4]!r}', path, 0)
    (stored_crc,) = struct.unpack('<I', data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError('CRC mismatch', path, len(data) - 4)
    reader = _Reader(data, path)
    reader.pos = 4
    version, count = reader.unpack('<II', 'header')
    if version != VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}', path, 4)
    state = OrderedDict()
    for _ in range(count):
        (length,) = reader.unpack('<I', 'name length')
        offset = reader.pos
        try:
            name = reader.take(length, 'name').decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError('tensor name is not UTF-8', path, offset) from None
        (rank,) = reader.unpack('<I', f'rank of {name}')
        dims = reader.unpack(f'<{rank}Q', f'dims of {name}')
        size = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(4 * size, f'payload of {name}')
        state[name] = np.frombuffer(payload, dtype='<f4').astype(np.float32).reshape(dims)
    if reader.pos != len(data) - 4:
        raise CheckpointError('trailing bytes after the last tensor', path, reader.pos)
    return state


def save_checkpoint(path, model_or_state):
    state = model_or_state.state_dict() if hasattr(model_or_state, 'state_dict') else model_or_state
    data = encode_checkpoint(state)
    with open(path, 'wb') as handle:
        handle.write(data)
    logger.info('saved %d tensors to %s', len(state), path)


def load_checkpoint(path, model=None):
    """Read a checkpoint; with ``model``, also copy it into the model (strict names and shapes)."""
    with open(path, 'rb') as handle:
        state = decode_checkpoint(handle.read(), path)
    logger.info('loaded %d tensors from %s', len(state), path)
    if model is not None:
        model.load_state_dict(state)
        return model
    return state
