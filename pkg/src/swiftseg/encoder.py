"""Downsampling backbones producing lateral feature taps at strides 4..32.

Residual trunk taps are taken from the elementwise sum *before* the ReLU;
the activated value continues down the trunk (no pre-activation blocks).
Inverted-residual taps are the blocks' linear outputs, which in that
architecture are also what the trunk consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, ConvBNAct
from .tensor import Tensor

RESNET18_CHANNELS = (64, 128, 256, 512)
# MobileNetV2 inverted-residual table: (expand, channels, repeats, first stride)
MOBILENETV2_CFG = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def scale_channels(c: int, width_mult: float) -> int:
    # nearest multiple of 8, floor 8, so desk-scale models keep the topology
    return max(8, int(round(c * width_mult / 8)) * 8)


def _check_divisible(x: Tensor, by: int):
    _, _, h, w = x.shape
    if h % by or w % by:
        raise ValueError(f"input dims ({h}, {w}) must be divisible by {by}")


@dataclass
class EncoderTaps:
    """Pre-activation lateral taps at strides 4/8/16/32 plus the trunk
    activation the next stage actually consumes."""
    t4: Tensor
    t8: Tensor
    t16: Tensor
    t32: Tensor
    out: Tensor

    def as_tuple(self):
        return self.t4, self.t8, self.t16, self.t32


class BasicBlock(Module):
    def __init__(self, rng, cin, cout, stride, dtype):
        super().__init__()
        self.conv1 = ConvBNAct(rng, cin, cout, 3, stride=stride, padding=1, act="relu", dtype=dtype)
        self.conv2 = ConvBNAct(rng, cout, cout, 3, padding=1, act=None, dtype=dtype)
        if stride != 1 or cin != cout:
            self.down = ConvBNAct(rng, cin, cout, 1, stride=stride, act=None, dtype=dtype)
        else:
            self.down = None

    def forward(self, x: Tensor):
        h = self.conv2.forward(self.conv1.forward(x))
        shortcut = self.down.forward(x) if self.down is not None else x
        pre = T.add(h, shortcut)
        return pre, T.relu(pre)

    def out_hw(self, in_hw):
        return self.conv1.out_hw(in_hw)

    def macs(self, in_hw) -> int:
        mid = self.conv1.out_hw(in_hw)
        m = self.conv1.macs(in_hw) + self.conv2.macs(mid)
        if self.down is not None:
            m += self.down.macs(in_hw)
        return m


class ResGroup(Module):
    """Two basic blocks sharing one spatial resolution; the group's lateral
    tap is the last block's pre-ReLU sum."""

    def __init__(self, rng, cin, cout, stride, dtype):
        super().__init__()
        self.block0 = BasicBlock(rng, cin, cout, stride, dtype)
        self.block1 = BasicBlock(rng, cout, cout, 1, dtype)
        self.cout = cout

    def forward(self, x: Tensor):
        _, h = self.block0.forward(x)
        return self.block1.forward(h)  # (tap, trunk)

    def out_hw(self, in_hw):
        return self.block0.out_hw(in_hw)

    def macs(self, in_hw) -> int:
        return self.block0.macs(in_hw) + self.block1.macs(self.block0.out_hw(in_hw))


class ResNet18Encoder(Module):
    def __init__(self, rng, width_mult=1.0, dtype=np.float32):
        super().__init__()
        chans = [scale_channels(c, width_mult) for c in RESNET18_CHANNELS]
        self.tap_channels = tuple(chans)
        self.stem = ConvBNAct(rng, 3, chans[0], 7, stride=2, padding=3, act="relu", dtype=dtype)
        self.group1 = ResGroup(rng, chans[0], chans[0], 1, dtype)
        self.group2 = ResGroup(rng, chans[0], chans[1], 2, dtype)
        self.group3 = ResGroup(rng, chans[1], chans[2], 2, dtype)
        self.group4 = ResGroup(rng, chans[2], chans[3], 2, dtype)
        self._groups = (self.group1, self.group2, self.group3, self.group4)

    def forward(self, x: Tensor) -> EncoderTaps:
        _check_divisible(x, 32)
        h = self.stem.forward(x)
        h = T.max_pool2d(h, 3, stride=2, padding=1)
        taps = []
        for group in self._groups:
            tap, h = group.forward(h)
            taps.append(tap)
        return EncoderTaps(*taps, out=h)

    def stage_report(self, in_hw):
        """Analytic (name, out_channels, out_hw, macs, params) per stage."""
        hw = (in_hw[0] // 2, in_hw[1] // 2)
        yield ("stem", self.stem.conv.cout, hw, self.stem.macs(in_hw),
               self.stem.parameter_count())
        hw = T.conv_out_hw(hw, (3, 3), (2, 2), (1, 1), (1, 1))  # stem max pool
        for gi, group in enumerate(self._groups, start=1):
            macs = group.macs(hw)
            hw = group.out_hw(hw)
            yield (f"group{gi}", group.cout, hw, macs, group.parameter_count())


class InvertedResidual(Module):
    def __init__(self, rng, cin, cout, stride, expand, dtype):
        super().__init__()
        hid = cin * expand
        self.expand = None if expand == 1 else ConvBNAct(rng, cin, hid, 1, act="relu6", dtype=dtype)
        self.depth = ConvBNAct(rng, hid, hid, 3, stride=stride, padding=1,
                               groups=hid, act="relu6", dtype=dtype)
        self.project = ConvBNAct(rng, hid, cout, 1, act=None, dtype=dtype)
        self.use_res = stride == 1 and cin == cout

    def forward(self, x: Tensor) -> Tensor:
        h = x if self.expand is None else self.expand.forward(x)
        h = self.project.forward(self.depth.forward(h))
        return T.add(h, x) if self.use_res else h

    def out_hw(self, in_hw):
        return self.depth.out_hw(in_hw)

    def macs(self, in_hw) -> int:
        m = 0
        if self.expand is not None:
            m += self.expand.macs(in_hw)
        mid = self.depth.out_hw(in_hw)
        return m + self.depth.macs(in_hw) + self.project.macs(mid)


class MobileNetV2Encoder(Module):
    def __init__(self, rng, width_mult=1.0, dtype=np.float32):
        super().__init__()
        stem_c = scale_channels(32, width_mult)
        self.stem = ConvBNAct(rng, 3, stem_c, 3, stride=2, padding=1, act="relu6", dtype=dtype)
        blocks = []
        strides = []
        cin, stride = stem_c, 2
        for expand, c, repeats, first_stride in MOBILENETV2_CFG:
            cout = scale_channels(c, width_mult)
            for i in range(repeats):
                s = first_stride if i == 0 else 1
                blk = InvertedResidual(rng, cin, cout, s, expand, dtype)
                setattr(self, f"block{len(blocks)}", blk)
                blocks.append(blk)
                stride *= s
                strides.append(stride)
                cin = cout
        self._blocks = blocks
        self._strides = strides
        # lateral taps: last block output at each stride level
        self._tap_index = {s: max(i for i, bs in enumerate(strides) if bs == s)
                           for s in (4, 8, 16, 32)}
        self.tap_channels = tuple(blocks[self._tap_index[s]].project.conv.cout
                                  for s in (4, 8, 16, 32))

    def forward(self, x: Tensor) -> EncoderTaps:
        _check_divisible(x, 32)
        h = self.stem.forward(x)
        taps = {}
        for i, blk in enumerate(self._blocks):
            h = blk.forward(h)
            taps[i] = h
        return EncoderTaps(*(taps[self._tap_index[s]] for s in (4, 8, 16, 32)), out=h)

    def stage_report(self, in_hw):
        hw = (in_hw[0] // 2, in_hw[1] // 2)
        # stride-2 blocks fold into the stem row; groups 1..4 are stride 4..32
        rows = {s: [0, 0, None, None] for s in (2, 4, 8, 16, 32)}
        rows[2] = [self.stem.macs(in_hw), self.stem.parameter_count(),
                   self.stem.conv.cout, hw]
        for blk, s in zip(self._blocks, self._strides):
            rows[s][0] += blk.macs(hw)
            hw = blk.out_hw(hw)
            rows[s][1] += blk.parameter_count()
            rows[s][2] = blk.project.conv.cout
            rows[s][3] = hw
        yield ("stem", rows[2][2], rows[2][3], rows[2][0], rows[2][1])
        for gi, s in enumerate((4, 8, 16, 32), start=1):
            yield (f"group{gi}", rows[s][2], rows[s][3], rows[s][0], rows[s][1])


def make_encoder(backbone: str, rng, width_mult=1.0, dtype=np.float32):
    if backbone == "resnet18":
        return ResNet18Encoder(rng, width_mult, dtype)
    if backbone == "mobilenetv2":
        return MobileNetV2Encoder(rng, width_mult, dtype)
    raise ValueError(f"unsupported backbone {backbone!r}")
