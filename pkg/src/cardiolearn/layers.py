"""Parameterized layers built on the tensor kernel.

Layers own :class:`Parameter` objects and expose ``forward(x, train)``.
Weight kernels can be marked shared/prunable for the continual-learning
engine; biases and batch-norm affine terms are always task-exclusive.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Minimal container tracking child modules and parameters in order."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._parameters[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        else:
            self._parameters.pop(key, None)
            self._modules.pop(key, None)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for k, p in self._parameters.items():
            yield (prefix + k if prefix else k), p
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix + k + "." if prefix else k + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for k, m in self._modules.items():
            yield from m.named_modules(prefix + k + "." if prefix else k + ".")

    def assign_parameter_names(self, prefix=""):
        """Write the full dotted path into each parameter's ``name``."""
        for name, p in self.named_parameters(prefix):
            p.name = name


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ModuleDict(Module):
    def __init__(self):
        super().__init__()
        self._keys = []

    def set(self, key, module):
        if key not in self._keys:
            self._keys.append(key)
        setattr(self, key, module)

    def get(self, key):
        return getattr(self, key)

    def __contains__(self, key):
        return key in self._keys

    def keys(self):
        return list(self._keys)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, *, rng, dtype,
                 family="exclusive", prunable=False, bias=True):
        super().__init__()
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.weight = Parameter(
            he_normal(rng, (out_ch, in_ch, k), in_ch * k, dtype),
            family=family, prunable=prunable,
        )
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x, train=False):
        b = self.bias.node() if self.bias is not None else None
        return T.conv1d(x, self.weight.node(), b, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, in_ch, out_ch, k, stride, *, rng, dtype,
                 family="exclusive", prunable=False, bias=True):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.weight = Parameter(
            he_normal(rng, (in_ch, out_ch, k), in_ch * k, dtype),
            family=family, prunable=prunable,
        )
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x, train=False):
        b = self.bias.node() if self.bias is not None else None
        return T.conv_transpose1d(x, self.weight.node(), b, self.stride)


class Linear(Module):
    def __init__(self, in_f, out_f, *, rng, dtype, family="exclusive", prunable=False, bias=True):
        super().__init__()
        self.in_f, self.out_f = in_f, out_f
        self.weight = Parameter(
            he_normal(rng, (out_f, in_f), in_f, dtype), family=family, prunable=prunable,
        )
        self.bias = Parameter(np.zeros(out_f, dtype=dtype)) if bias else None

    def forward(self, x, train=False):
        b = self.bias.node() if self.bias is not None else None
        return T.linear(x, self.weight.node(), b)


class BatchNorm1d(Module):
    """Batch normalization with momentum-0.1 running statistics.

    Running statistics are plain arrays swapped per task by the engine;
    they update only in training mode.
    """

    momentum = 0.1

    def __init__(self, channels, *, dtype):
        super().__init__()
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def reset_stats(self):
        self.running_mean = np.zeros_like(self.running_mean)
        self.running_var = np.ones_like(self.running_var)

    def forward(self, x, train=False):
        if train:
            mean = x.data.mean(axis=(0, 2))
            var = x.data.var(axis=(0, 2))
            y = T.batchnorm1d(x, self.gamma.node(), self.beta.node(), mean, var, batch_stats=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.data.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(x.data.dtype)
            return y
        return T.batchnorm1d(
            x, self.gamma.node(), self.beta.node(),
            self.running_mean, self.running_var, batch_stats=False,
        )


class ConvBlock(Module):
    """Two conv+BN pairs with an identity skip and trailing ReLU."""

    def __init__(self, channels, *, rng, dtype, family):
        super().__init__()
        self.conv1 = Conv1d(channels, channels, 3, padding=1, rng=rng, dtype=dtype,
                            family=family, prunable=True)
        self.bn1 = BatchNorm1d(channels, dtype=dtype)
        self.conv2 = Conv1d(channels, channels, 3, padding=1, rng=rng, dtype=dtype,
                            family=family, prunable=True)
        self.bn2 = BatchNorm1d(channels, dtype=dtype)

    def forward(self, x, train=False):
        h = T.relu(self.bn1.forward(self.conv1.forward(x, train), train))
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        return T.relu(T.add(h, x))


class SEBlock(Module):
    """Squeeze-and-excitation channel gate: pool, bottleneck, sigmoid."""

    def __init__(self, channels, *, rng, dtype, family, reduction=4):
        super().__init__()
        hidden = -(-channels // reduction)  # bottleneck rounds up
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype, family=family, prunable=True)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype, family=family, prunable=True)

    def channel_weights(self, x, train=False):
        pooled = T.global_avg_pool(x)
        return T.sigmoid(self.fc2.forward(T.relu(self.fc1.forward(pooled))))

    def forward(self, x, train=False):
        return T.channel_scale(x, self.channel_weights(x, train))
