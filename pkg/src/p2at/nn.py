"""Minimal module system: parameter registration, naming, train/eval modes."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .errors import ConfigError
from .tensor import Parameter


class Module:
    """Base class for parameterized blocks.

    Parameters, sub-modules and lists of sub-modules assigned as attributes
    are discovered in assignment order, which fixes the hierarchical names
    (``"aggregator.layer0.attn.q_h.weight"``). Non-trainable state lives in
    ``_buffers`` as plain numpy arrays.
    """

    def __init__(self):
        self.training = True
        self._buffers = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix=""):
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, arr in self._buffers.items():
            yield f"{prefix}{key}", arr
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name
        return self

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        """Ordered ``name -> array`` of parameters followed by buffers."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size=1, rng=None, stride=1, padding=None,
                 groups=1, bias=True):
        super().__init__()
        if rng is None:
            raise ValueError("Conv2d needs an explicit numpy Generator for initialization")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide in={in_ch} and out={out_ch}")
        fan_in = (in_ch // groups) * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch // groups, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def zero_(self):
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self._buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self._buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class ConvBN(Module):
    """Bias-free convolution followed by batch norm and an optional activation."""

    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, groups=1, act=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel_size, rng, stride=stride, groups=groups, bias=False)
        self.bn = BatchNorm2d(out_ch)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        if self.act == "relu":
            return F.relu(y)
        if self.act == "hardswish":
            return F.hardswish(y)
        return y
