"""
Trainable building blocks.

A ``Module`` owns named parameter arrays, their gradient accumulators and
non-trainable buffers, plus child modules registered by attribute
assignment. The network is a static graph: every composite implements
``forward`` and the matching ``backward`` by hand, calling the kernels in
``tensor_ops``.

Forward inputs are cached for the backward pass only while ``retain`` is set
(``train()`` or ``requires_grad_()``); in plain ``eval()`` mode a module keeps
no per-call state, so one instance can serve concurrent forwards.
"""
import logging
from collections import OrderedDict

import numpy as np

from . import tensor_ops as ops
from .exceptions import CheckpointMismatch, ConfigurationError

logger = logging.getLogger(__name__)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


# Fan-in std multiplier for convolutions feeding a batch norm. The norm output
# does not depend on the weight scale, so only the optimizer sees it.
NORMED_INIT_GAIN = 0.125


def he_normal(rng, shape, fan_in, gain=1.0, dtype=np.float32):
    """Variance-scaling (fan-in) normal init, std = gain * sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))).astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, '_children', OrderedDict())
        self._params = OrderedDict()
        self._grads = OrderedDict()
        self._buffers = OrderedDict()
        self._cache = None
        self.training = False
        self.retain = False

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad_output):
        raise NotImplementedError

    # Registration

    def register_parameter(self, name, value):
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def register_buffer(self, name, value):
        self._buffers[name] = value
        return value

    # Traversal

    def modules(self, prefix=''):
        yield prefix, self
        for name, child in self._children.items():
            yield from child.modules(f'{prefix}{name}.')

    def named_parameters(self):
        for prefix, module in self.modules():
            for name, value in module._params.items():
                yield prefix + name, value

    def named_gradients(self):
        for prefix, module in self.modules():
            for name, value in module._grads.items():
                yield prefix + name, value

    def named_buffers(self):
        for prefix, module in self.modules():
            for name, value in module._buffers.items():
                yield prefix + name, value

    def num_parameters(self):
        return int(sum(p.size for _, p in self.named_parameters()))

    # Modes

    def _set_flags(self, training=None, retain=None):
        for _, module in self.modules():
            if training is not None:
                module.training = training
            if retain is not None:
                module.retain = retain
                if not retain:
                    module._cache = None
        return self

    def train(self, mode=True):
        return self._set_flags(training=mode, retain=mode)

    def eval(self):
        return self._set_flags(training=False, retain=False)

    def requires_grad_(self, flag=True):
        """Keep forward caches for a backward pass without touching the norm mode."""
        return self._set_flags(retain=flag)

    def to_dtype(self, dtype):
        """Cast every parameter, gradient and buffer, e.g. to float64 for gradient checks."""
        for _, module in self.modules():
            for store in (module._params, module._grads, module._buffers):
                for name, value in store.items():
                    store[name] = value.astype(dtype)
        return self

    def zero_grad(self):
        for _, g in self.named_gradients():
            g[...] = 0

    def _saved(self):
        if self._cache is None:
            raise ConfigurationError(
                f'{type(self).__name__}.backward called without a retained forward; call train() or requires_grad_()'
            )
        return self._cache

    def _save(self, value):
        if self.retain:
            self._cache = value

    # State

    def state_dict(self):
        """Parameters then buffers of each module, in construction order."""
        state = OrderedDict()
        for prefix, module in self.modules():
            for name, value in module._params.items():
                state[prefix + name] = value
            for name, value in module._buffers.items():
                state[prefix + name] = value
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        for name, value in own.items():
            if name not in state:
                raise CheckpointMismatch(f'missing tensor {name!r}')
            if tuple(state[name].shape) != value.shape:
                raise CheckpointMismatch(
                    f'tensor {name!r} has shape {tuple(state[name].shape)}, model expects {value.shape}'
                )
        for name in state:
            if name not in own:
                raise CheckpointMismatch(f'unexpected tensor {name!r}')
        for name, value in own.items():
            value[...] = state[name]


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=None, groups=1, bias=False,
                 gain=1.0):
        super().__init__()
        kh, kw = _pair(kernel_size)
        if padding is None:
            padding = ((kh - 1) // 2, (kw - 1) // 2)
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(f'channels {in_channels}->{out_channels} not divisible by groups={groups}')
        fan_in = (in_channels // groups) * kh * kw
        self.register_parameter('weight', he_normal(rng, (out_channels, in_channels // groups, kh, kw), fan_in, gain))
        if bias:
            self.register_parameter('bias', np.zeros(out_channels, dtype=np.float32))
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.groups = groups

    @property
    def params(self):
        return ops.ConvParams(
            weight=self._params['weight'],
            bias=self._params.get('bias'),
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )

    @property
    def in_channels(self):
        return self.params.in_channels

    @property
    def out_channels(self):
        return self.params.out_channels

    def forward(self, x):
        self._save(x)
        return ops.conv2d(x, self.params)

    def backward(self, grad_output):
        x = self._saved()
        gi, gw, gb = ops.conv2d_backward(x, self.params, grad_output)
        self._grads['weight'] += gw
        if 'bias' in self._grads:
            self._grads['bias'] += gb
        return gi

    def output_shape(self, shape):
        n, _, h, w = shape
        ho, wo = self.params.output_size(h, w)
        return n, self.out_channels, ho, wo

    def trace(self, tracer, shape, name):
        out = self.output_shape(shape)
        kh, kw = self.params.kernel_size
        macs = kh * kw * (self.in_channels // self.groups) * out[1] * out[2] * out[3] * out[0]
        tracer.record(name, params=self.num_parameters(), macs=macs)
        return out


class BatchNorm2d(Module):
    def __init__(self, channels, epsilon=1e-5, momentum=0.1):
        super().__init__()
        self.register_parameter('gamma', np.ones(channels, dtype=np.float32))
        self.register_parameter('beta', np.zeros(channels, dtype=np.float32))
        self.register_buffer('running_mean', np.zeros(channels, dtype=np.float32))
        self.register_buffer('running_var', np.ones(channels, dtype=np.float32))
        self.epsilon = epsilon
        self.momentum = momentum

    @property
    def bn(self):
        return ops.BatchNormParams(
            gamma=self._params['gamma'],
            beta=self._params['beta'],
            running_mean=self._buffers['running_mean'],
            running_var=self._buffers['running_var'],
            epsilon=self.epsilon,
            momentum=self.momentum,
        )

    def forward(self, x):
        self._save(x)
        return ops.batch_norm(x, self.bn, training=self.training)

    def backward(self, grad_output):
        x = self._saved()
        gi, g_gamma, g_beta = ops.batch_norm_backward(x, self.bn, grad_output, training=self.training)
        self._grads['gamma'] += g_gamma
        self._grads['beta'] += g_beta
        return gi


class ConvBNAct(Module):
    """
    Bias-free convolution, batch norm, then ReLU6 unless ``act`` is False.

    The convolution starts at ``NORMED_INIT_GAIN`` times the fan-in std.
    """

    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, groups=1, act=True):
        super().__init__()
        self.conv = Conv2d(
            in_channels, out_channels, kernel_size, rng, stride=stride, groups=groups, gain=NORMED_INIT_GAIN,
        )
        self.norm = BatchNorm2d(out_channels)
        self.act = act

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        y = self.norm(self.conv(x))
        if not self.act:
            return y
        self._save(y)
        return ops.relu6(y)

    def backward(self, grad_output):
        if self.act:
            grad_output = ops.relu6_backward(self._saved(), grad_output)
        return self.conv.backward(self.norm.backward(grad_output))

    def trace(self, tracer, shape, name):
        out = self.conv.output_shape(shape)
        kh, kw = self.conv.params.kernel_size
        elements = int(np.prod(out))
        macs = kh * kw * (self.conv.in_channels // self.conv.groups) * elements
        tracer.record(
            name,
            params=self.num_parameters(),
            macs=macs,
            elementwise=elements * (2 if self.act else 1),
        )
        return out


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, index):
        return list(self._children.values())[index]

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x

    def backward(self, grad_output):
        for layer in reversed(list(self)):
            grad_output = layer.backward(grad_output)
        return grad_output

    def trace(self, tracer, shape, name):
        for key, layer in self._children.items():
            shape = layer.trace(tracer, shape, f'{name}.{key}')
        return shape


class InvertedResidual(Module):
    """
    Expand 1x1, depthwise 3x3 (carries the stride), linear project 1x1.

    The input is added back when the stride is 1 and the channel count is
    unchanged.
    """

    def __init__(self, in_channels, out_channels, rng, stride=1, expansion=4):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigurationError(f'inverted residual stride must be 1 or 2, got {stride}')
        hidden = in_channels * expansion
        self.expand = ConvBNAct(in_channels, hidden, 1, rng)
        self.depthwise = ConvBNAct(hidden, hidden, 3, rng, stride=stride, groups=hidden)
        self.project = ConvBNAct(hidden, out_channels, 1, rng, act=False)
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.hidden_channels = hidden

    @property
    def use_skip(self):
        return self.stride == 1 and self.in_channels == self.out_channels

    def forward(self, x):
        out = self.project(self.depthwise(self.expand(x)))
        if self.use_skip:
            out = ops.ewise('add', x, out)
        return out

    def backward(self, grad_output):
        g = self.expand.backward(self.depthwise.backward(self.project.backward(grad_output)))
        if self.use_skip:
            g = ops.ewise('add', g, grad_output)
        return g

    def trace(self, tracer, shape, name):
        shape = self.expand.trace(tracer, shape, f'{name}.expand')
        shape = self.depthwise.trace(tracer, shape, f'{name}.depthwise')
        shape = self.project.trace(tracer, shape, f'{name}.project')
        if self.use_skip:
            tracer.record(f'{name}.skip', elementwise=int(np.prod(shape)))
        return shape
