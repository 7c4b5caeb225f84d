"""Named-parameter module system and the conv/BN building blocks.

Modules register child modules, parameter tensors, and non-differentiable
buffers (BN running statistics) by attribute assignment; ``named_parameters``
and ``state`` walk the tree producing the stable dotted namespace used by
checkpoints, the optimizer, and the profiler.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Parameters and buffers by name; arrays are the live storage."""
        out = {name: p.data for name, p in self.named_parameters(prefix)}
        out.update(self.named_buffers(prefix))
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def train(self, flag: bool = True):
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m.train(flag)
        return self

    def requires_grad_(self, flag: bool = True):
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


class ModuleList:
    """Sequence container whose entries participate in the name tree."""

    def __init__(self, mods=()):
        self._list = list(mods)

    def append(self, m):
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def named_parameters(self, prefix=""):
        for i, m in enumerate(self._list):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, m in enumerate(self._list):
            yield from m.named_buffers(f"{prefix}{i}.")

    def train(self, flag=True):
        for m in self._list:
            m.train(flag)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, dilation=1,
                 groups=1, bias=False, dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.groups = cin, cout, groups
        self.kernel = T._pair(kernel)
        self.stride = T._pair(stride)
        self.padding = T._pair(padding)
        self.dilation = T._pair(dilation)
        kh, kw = self.kernel
        fan_in = (cin // groups) * kh * kw
        self.weight = Tensor(kaiming_normal(rng, (cout, cin // groups, kh, kw), fan_in, dtype))
        self.bias = Tensor(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding,
                        self.dilation, self.groups)

    def out_hw(self, in_hw):
        return T.conv_out_hw(in_hw, self.kernel, self.stride, self.padding, self.dilation)

    def macs(self, in_hw) -> int:
        ho, wo = self.out_hw(in_hw)
        kh, kw = self.kernel
        return self.cout * (self.cin // self.groups) * kh * kw * ho * wo


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, self.eps, self.momentum, self.training)


class ConvBNAct(Module):
    """conv -> BN -> activation unit; BN folds into the conv at fusion time.

    ``act`` is "relu", "relu6", or None (linear). After ``fuse_bn_`` the BN
    node is gone and the conv carries the folded bias.
    """

    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, groups=1,
                 act="relu", bias=False, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel, stride=stride, padding=padding,
                           groups=groups, bias=bias, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv.forward(x)
        if self.bn is not None:
            y = self.bn.forward(y)
        if self.act == "relu":
            y = T.relu(y)
        elif self.act == "relu6":
            y = T.relu6(y)
        return y

    def fuse_bn_(self):
        if self.bn is None:
            return
        fold_bn_into_conv(self.conv, self.bn)
        self._modules.pop("bn")
        object.__setattr__(self, "bn", None)

    def out_hw(self, in_hw):
        return self.conv.out_hw(in_hw)

    def macs(self, in_hw) -> int:
        return self.conv.macs(in_hw)


class FusionError(RuntimeError):
    """BN fusion applied where no preceding convolution exists."""


def fold_bn_into_conv(conv: Conv2d, bn: BatchNorm2d):
    """w' = w * gamma/sqrt(var+eps) per output channel;
    b' = (b - mean) * gamma/sqrt(var+eps) + beta.

    Folding happens in float64 and is cast once, so the fold itself adds at
    most half an ulp on top of the engine precision."""
    if conv is None:
        raise FusionError("batch norm has no preceding convolution to fuse into")
    dtype = conv.weight.data.dtype
    trainable = conv.weight.requires_grad
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    conv.weight = Tensor((conv.weight.data.astype(np.float64)
                          * scale[:, None, None, None]).astype(dtype),
                         requires_grad=trainable)
    old_bias = conv.bias.data if conv.bias is not None else np.zeros(conv.cout, dtype=dtype)
    new_bias = (old_bias.astype(np.float64) - bn.running_mean) * scale + bn.beta.data
    conv.bias = Tensor(new_bias.astype(dtype), requires_grad=trainable)
