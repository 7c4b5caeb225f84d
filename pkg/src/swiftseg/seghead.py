"""Spatial pyramid pooling, the ladder decoder, model assembly, BN fusion.

Two assemblies share all building blocks: the single-scale model (encoder,
SPP on the coarsest features, three upsample steps) and the two-level
pyramid model (one shared-parameter encoder run on the image and on its
half-resolution copy, equal-resolution taps concatenated, SPP on the
globally coarsest tensor, one extra upsample step).

Weights are immutable during inference, so concurrent tape-free forwards
over one model are safe; training and BN fusion need exclusive access
(fusion therefore returns a copy).
"""

from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .encoder import make_encoder
from .layers import Module, ConvBNAct, Conv2d, BatchNorm2d, FusionError
from .tensor import Tensor


class SpatialPyramidPooling(Module):
    """Grid-pool the input over several granularities, project, upsample back,
    concatenate with a projected copy of the input, and fuse to ``out_channels``.

    With an empty grid list this degrades to a plain 1x1 projection: the
    receptive-field module is ablated but the decoder still gets its width.
    """

    def __init__(self, rng, cin, grids, per_level, out_channels, interp="bilinear",
                 dtype=np.float32):
        super().__init__()
        self.grids = tuple(grids)
        self.interp = interp
        self.cin = cin
        self.out_channels = out_channels
        if self.grids:
            self.input_proj = ConvBNAct(rng, cin, per_level, 1, act="relu", dtype=dtype)
            for g in self.grids:
                setattr(self, f"level{g}", ConvBNAct(rng, cin, per_level, 1, act="relu", dtype=dtype))
            self.fuse = ConvBNAct(rng, per_level * (len(self.grids) + 1), out_channels,
                                  1, act="relu", dtype=dtype)
        else:
            self.input_proj = ConvBNAct(rng, cin, out_channels, 1, act="relu", dtype=dtype)
            self.fuse = None

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if self.grids and max(self.grids) > min(h, w):
            raise ValueError(f"SPP grid {max(self.grids)} exceeds spatial dims ({h}, {w})")
        proj = self.input_proj.forward(x)
        if not self.grids:
            return proj
        feats = [proj]
        for g in self.grids:
            p = T.grid_avg_pool(x, g)
            p = getattr(self, f"level{g}").forward(p)
            feats.append(T.resize(p, h, w, self.interp))
        return self.fuse.forward(T.concat_channels(feats))

    def macs(self, in_hw) -> int:
        # counting convention: level convs on fixed gxg grids are resolution
        # independent and excluded so MAC totals stay exactly quadratic
        m = self.input_proj.macs(in_hw)
        if self.fuse is not None:
            m += self.fuse.macs(in_hw)
        return m


class UpsampleModule(Module):
    """One ladder step: bilinear 2x upsample, sum with the projected lateral
    feature, blend with a 3x3 convolution. Lateral projection and blend are
    each conv + BN + ReLU."""

    def __init__(self, rng, lateral_channels, width, dtype=np.float32):
        super().__init__()
        if lateral_channels is not None:
            self.lateral = ConvBNAct(rng, lateral_channels, width, 1, act="relu", dtype=dtype)
        else:
            self.lateral = None
        self.blend = ConvBNAct(rng, width, width, 3, padding=1, act="relu", dtype=dtype)

    def forward(self, low: Tensor, lateral: Tensor | None, interp="bilinear") -> Tensor:
        _, _, h, w = low.shape
        if lateral is not None:
            lh, lw = lateral.shape[2], lateral.shape[3]
            if (lh, lw) != (2 * h, 2 * w):
                raise ValueError(f"lateral dims ({lh}, {lw}) are not 2x low dims ({h}, {w})")
        else:
            lh, lw = 2 * h, 2 * w
        up = T.resize(low, lh, lw, interp)
        if lateral is not None and self.lateral is not None:
            up = T.add(up, self.lateral.forward(lateral))
        return self.blend.forward(up)

    def macs(self, in_hw, with_lateral=True) -> int:
        out_hw = (2 * in_hw[0], 2 * in_hw[1])
        m = self.blend.macs(out_hw)
        if with_lateral and self.lateral is not None:
            m += self.lateral.macs(out_hw)
        return m


class Decoder(Module):
    """Upsample modules up1..upK plus the logits convolution."""

    def __init__(self, rng, lateral_channels, width, num_classes, dtype=np.float32):
        super().__init__()
        self.steps = []
        for k, lc in enumerate(lateral_channels, start=1):
            mod = UpsampleModule(rng, lc, width, dtype)
            setattr(self, f"up{k}", mod)
            self.steps.append(mod)
        self.classifier = Conv2d(rng, width, num_classes, 3, padding=1, bias=True, dtype=dtype)


class SegModel(Module):
    """Runnable segmentation graph assembled from a ModelSpec."""

    def __init__(self, rng, spec, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "fused", False)
        object.__setattr__(self, "dtype", np.dtype(dtype))
        self.backbone = make_encoder(spec.backbone, rng, spec.width_mult, dtype)
        c4, c8, c16, c32 = self.backbone.tap_channels
        width = spec.decoder_width
        per_level = spec.spp_per_level if spec.spp_per_level else width
        spp_out = spec.spp_out if spec.spp_out else width
        self.spp = SpatialPyramidPooling(rng, c32, spec.spp_grids, per_level,
                                         spp_out, spec.interp, dtype)
        if spec.pyramid_levels == 1:
            laterals = [c16, c8, c4]
        else:
            # laterals are the equal-resolution concatenations of the two runs;
            # the final step up to stride 4 has none
            laterals = [c32 + c16, c16 + c8, c8 + c4, None]
        if not spec.lateral:
            laterals = [None] * len(laterals)
        self.decoder = Decoder(rng, laterals, width, spec.num_classes, dtype)

    # -- inference ----------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        if self.spec.pyramid_levels == 2:
            return self.pyramid_forward(x)
        return self.single_scale_forward(x)

    def single_scale_forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        taps = self.backbone.forward(x)
        y = self.spp.forward(taps.out)
        for step, lat in zip(self.decoder.steps, (taps.t16, taps.t8, taps.t4)):
            y = step.forward(y, lat if self.spec.lateral else None, self.spec.interp)
        logits = self.decoder.classifier.forward(y)
        return T.resize(logits, h, w, self.spec.interp)

    def pyramid_forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % 64 or w % 64:
            raise ValueError(f"pyramid model needs dims divisible by 64, got ({h}, {w})")
        full = self.backbone.forward(x)
        half = self.backbone.forward(T.resize(x, h // 2, w // 2, self.spec.interp))
        y = self.spp.forward(half.out)
        if self.spec.lateral:
            lats = [T.concat_channels([full.t32, half.t16]),
                    T.concat_channels([full.t16, half.t8]),
                    T.concat_channels([full.t8, half.t4]),
                    None]
        else:
            lats = [None] * 4
        for step, lat in zip(self.decoder.steps, lats):
            y = step.forward(y, lat, self.spec.interp)
        logits = self.decoder.classifier.forward(y)
        return T.resize(logits, h, w, self.spec.interp)

    def logits(self, image: np.ndarray) -> np.ndarray:
        """Tape-free forward over a [3,H,W] or [N,3,H,W] float image array."""
        arr = np.asarray(image, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[None]
        with T.no_grad():
            return self.forward(Tensor(arr)).data

    def predict(self, image: np.ndarray) -> np.ndarray:
        return self.logits(image).argmax(axis=1).astype(np.int64)


def _iter_convbn(module: Module):
    if isinstance(module, ConvBNAct):
        yield module
    for child in module._modules.values():
        if isinstance(child, Module):
            yield from _iter_convbn(child)
        else:  # ModuleList
            for m in child:
                yield from _iter_convbn(m)


def _iter_bare_bn(module: Module):
    if isinstance(module, ConvBNAct):
        return
    for child in module._modules.values():
        if isinstance(child, BatchNorm2d):
            yield child
        elif isinstance(child, Module):
            yield from _iter_bare_bn(child)
        else:
            for m in child:
                yield from _iter_bare_bn(m)


def calibrate_bn_stats(model: SegModel, x: Tensor):
    """One stats-capture pass: running buffers take the batch statistics of
    ``x`` exactly (momentum forced to 1). Untrained models need this before
    BN fusion, otherwise the (0,1) init buffers do not describe activations."""
    saved = [(unit.bn, unit.bn.momentum) for unit in _iter_convbn(model)
             if unit.bn is not None]
    for bn, _ in saved:
        bn.momentum = 1.0
    was_training = model.training
    model.train(True)
    with T.no_grad():
        model.forward(x)
    model.train(was_training)
    for bn, momentum in saved:
        bn.momentum = momentum
    return model


def fuse_bn(model: SegModel) -> SegModel:
    """Fold every BN into its preceding convolution; returns a fused copy,
    leaving the input model untouched. Inference outputs are preserved."""
    stray = list(_iter_bare_bn(model))
    if stray:
        raise FusionError("batch norm without a preceding convolution cannot be fused")
    fused = copy.deepcopy(model)
    for unit in _iter_convbn(fused):
        unit.fuse_bn_()
    object.__setattr__(fused, "fused", True)
    return fused
