"""Candidate operations and the tiny module system they are built on."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

NORMAL_OPS = (
    "none",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "sep_conv_7x7",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "conv_1x1",
    "conv_3x3",
    "conv_3x1_1x3",
)
REDUCTION_OPS = (
    "none",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "max_pool_5x5",
    "max_pool_7x7",
)
CATALOGS = {"normal": NORMAL_OPS, "reduction": REDUCTION_OPS}

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

# forward modes: "train" uses batch statistics and updates running stats,
# "batch" uses batch statistics read-only, "eval" uses running stats.
MODES = ("train", "batch", "eval")


class Module:
    """Container of named parameters, running statistics and child modules."""

    def __init__(self):
        self._params = {}
        self._stats = {}
        self._children = {}

    def add_param(self, name, data):
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_stats(self, name, channels):
        s = T.RunningStats(channels)
        self._stats[name] = s
        return s

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_stats(self, prefix=""):
        for name, s in self._stats.items():
            yield prefix + name, s
        for cname, child in self._children.items():
            yield from child.named_stats(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def he_normal(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class BatchNorm(Module):
    def __init__(self, channels, affine=True):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels)) if affine else None
        self.beta = self.add_param("beta", np.zeros(channels)) if affine else None
        self.stats = self.add_stats("stats", channels)

    def __call__(self, x, mode):
        training = mode != "eval"
        running = self.stats if mode == "train" else (None if training else self.stats)
        return T.batchnorm2d(
            x, self.gamma, self.beta, running, training=training, momentum=BN_MOMENTUM, eps=BN_EPS
        )


class Conv(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, dilation=1, groups=1):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.w = self.add_param("w", he_normal(rng, (cout, cin // groups, kh, kw)))
        self.kw = dict(stride=stride, padding=padding, dilation=dilation, groups=groups)

    def __call__(self, x):
        return T.conv2d(x, self.w, **self.kw)


class Zero(Module):
    def __init__(self, stride):
        super().__init__()
        self.stride = stride

    def __call__(self, x, mode):
        n, c, h, w = x.shape
        s = self.stride
        return T.zeros((n, c, -(-h // s), -(-w // s)))


class Identity(Module):
    def __call__(self, x, mode):
        return x


class SubsampleReduce(Module):
    """Parameter-free stride-2 shortcut: half the channels sampled at even
    offsets, the other half at odd offsets."""

    def __call__(self, x, mode):
        c = x.shape[1]
        if c % 2 or x.shape[2] % 2 or x.shape[3] % 2:
            raise T.DimensionError(f"stride-2 skip needs even channels and spatial size, got {x.shape}")
        return T.concat([x[:, : c // 2, ::2, ::2], x[:, c // 2:, 1::2, 1::2]], axis=1)


class FactorizedReduce(Module):
    def __init__(self, rng, cin, cout):
        super().__init__()
        if cout % 2:
            raise ValueError("FactorizedReduce needs an even number of output channels")
        self.conv1 = self.add_child("conv1", Conv(rng, cin, cout // 2, 1, stride=2))
        self.conv2 = self.add_child("conv2", Conv(rng, cin, cout // 2, 1, stride=2))
        self.bn = self.add_child("bn", BatchNorm(cout))

    def __call__(self, x, mode):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise T.DimensionError(f"FactorizedReduce needs even spatial size, got {x.shape[2:]}")
        x = T.relu(x)
        return self.bn(T.concat([self.conv1(x), self.conv2(x[:, :, 1:, 1:])], axis=1), mode)


class ReLUConvBN(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0):
        super().__init__()
        self.conv = self.add_child("conv", Conv(rng, cin, cout, kernel, stride, padding))
        self.bn = self.add_child("bn", BatchNorm(cout))

    def __call__(self, x, mode):
        return self.bn(self.conv(T.relu(x)), mode)


class Conv3x1x1x3(Module):
    def __init__(self, rng, c, stride):
        super().__init__()
        self.conv_v = self.add_child("conv_v", Conv(rng, c, c, (3, 1), (stride, 1), (1, 0)))
        self.conv_h = self.add_child("conv_h", Conv(rng, c, c, (1, 3), (1, stride), (0, 1)))
        self.bn = self.add_child("bn", BatchNorm(c))

    def __call__(self, x, mode):
        return self.bn(self.conv_h(self.conv_v(T.relu(x))), mode)


class DilConv(Module):
    def __init__(self, rng, cin, cout, k, stride, dilation):
        super().__init__()
        pad = dilation * (k - 1) // 2
        self.dw = self.add_child("dw", Conv(rng, cin, cin, k, stride, pad, dilation, groups=cin))
        self.pw = self.add_child("pw", Conv(rng, cin, cout, 1))
        self.bn = self.add_child("bn", BatchNorm(cout))

    def __call__(self, x, mode):
        return self.bn(self.pw(self.dw(T.relu(x))), mode)


class SepConv(Module):
    def __init__(self, rng, c, k, stride):
        super().__init__()
        self.first = self.add_child("first", DilConv(rng, c, c, k, stride, 1))
        self.second = self.add_child("second", DilConv(rng, c, c, k, 1, 1))

    def __call__(self, x, mode):
        return self.second(self.first(x, mode), mode)


class Pool(Module):
    def __init__(self, c, kind, k, stride):
        super().__init__()
        self.kind, self.k, self.stride = kind, k, stride
        self.bn = self.add_child("bn", BatchNorm(c, affine=False))

    def __call__(self, x, mode):
        return self.bn(T.pool2d(x, self.kind, self.k, self.stride), mode)


def make_op(name, c, stride, rng):
    if name == "none":
        return Zero(stride)
    if name == "skip_connect":
        return Identity() if stride == 1 else SubsampleReduce()
    if name.startswith("sep_conv_"):
        return SepConv(rng, c, int(name[-1]), stride)
    if name.startswith("dil_conv_"):
        return DilConv(rng, c, c, int(name[-1]), stride, 2)
    if name == "conv_1x1":
        return ReLUConvBN(rng, c, c, 1, stride, 0)
    if name == "conv_3x3":
        return ReLUConvBN(rng, c, c, 3, stride, 1)
    if name == "conv_3x1_1x3":
        return Conv3x1x1x3(rng, c, stride)
    if name.startswith(("max_pool_", "avg_pool_")):
        return Pool(c, name[:3], int(name[-1]), stride)
    raise KeyError(f"unknown operation {name!r}")


def op_param_count(name, c):
    """Closed-form number of trainable scalars of candidate ``name`` on ``c`` channels."""
    bn = 2 * c
    if name in ("none", "skip_connect") or "pool" in name:
        return 0
    if name.startswith("sep_conv_"):
        k = int(name[-1])
        return 2 * (c * k * k + c * c + bn)
    if name.startswith("dil_conv_"):
        k = int(name[-1])
        return c * k * k + c * c + bn
    if name == "conv_1x1":
        return c * c + bn
    if name == "conv_3x3":
        return 9 * c * c + bn
    if name == "conv_3x1_1x3":
        return 6 * c * c + bn
    raise KeyError(f"unknown operation {name!r}")
