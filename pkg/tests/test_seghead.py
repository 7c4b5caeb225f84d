"""SPP, ladder steps, model forwards, weight sharing, and BN fusion."""

import numpy as np
import pytest

import swiftseg.tensor as T
from swiftseg.graph import ModelSpec, build
from swiftseg.layers import Module, BatchNorm2d, FusionError, ConvBNAct
from swiftseg.seghead import SpatialPyramidPooling, UpsampleModule, fuse_bn
from swiftseg.tensor import Tensor


def _rng_gen(seed=0):
    return np.random.default_rng(seed)


def _x(shape, seed=0):
    return Tensor(_rng_gen(seed).standard_normal(shape).astype(np.float32))


SMALL = dict(width_mult=0.25, decoder_width=32, spp_grids=(1, 2), num_classes=5)


class TestSpp:
    def test_output_shape_contract(self):
        spp = SpatialPyramidPooling(_rng_gen(), 512, (1, 2, 4, 8), 128, 128)
        y = spp.forward(_x((1, 512, 16, 32)))
        assert y.shape == (1, 128, 16, 32)

    def test_grid_exceeding_dims_rejected(self):
        spp = SpatialPyramidPooling(_rng_gen(), 8, (1, 2, 4, 8), 4, 4)
        with pytest.raises(ValueError, match="exceeds spatial dims"):
            spp.forward(_x((1, 8, 4, 4)))

    def test_constant_input_gives_constant_pool_levels(self):
        spp = SpatialPyramidPooling(_rng_gen(), 6, (1, 2), 4, 4)
        spp.train(False)
        a = spp.forward(Tensor(np.full((1, 6, 8, 8), 0.7, np.float32))).data
        b = spp.forward(Tensor(np.full((1, 6, 12, 12), 0.7, np.float32))).data
        # constant pooled levels resize to constants: output is spatially flat
        assert np.allclose(a, a[:, :, :1, :1], atol=1e-6)
        np.testing.assert_allclose(a[0, :, 0, 0], b[0, :, 0, 0], atol=1e-6)

    def test_empty_grids_build_projection_only(self):
        spp = SpatialPyramidPooling(_rng_gen(), 16, (), 8, 8)
        assert spp.fuse is None
        y = spp.forward(_x((1, 16, 4, 4)))
        assert y.shape == (1, 8, 4, 4)


class TestUpsampleModule:
    def test_shape_contract(self):
        up = UpsampleModule(_rng_gen(), 256, 128)
        y = up.forward(_x((1, 128, 8, 8)), _x((1, 256, 16, 16)))
        assert y.shape == (1, 128, 16, 16)

    def test_non_2x_ratio_rejected(self):
        up = UpsampleModule(_rng_gen(), 256, 128)
        with pytest.raises(ValueError, match="not 2x"):
            up.forward(_x((1, 128, 8, 8)), _x((1, 256, 24, 24)))

    def test_zero_lateral_weights_reduce_to_blend_of_resize(self):
        up = UpsampleModule(_rng_gen(), 16, 8)
        up.train(False)
        up.lateral.conv.weight.data[:] = 0.0
        low, lat = _x((1, 8, 4, 4)), _x((1, 16, 8, 8), seed=1)
        with_lat = up.forward(low, lat)
        without = up.forward(low, None)
        np.testing.assert_array_equal(with_lat.data, without.data)

    def test_no_lateral_module_skips_branch(self):
        up = UpsampleModule(_rng_gen(), None, 8)
        assert up.lateral is None
        y = up.forward(_x((1, 8, 4, 4)), None)
        assert y.shape == (1, 8, 8, 8)


class TestSingleScale:
    def test_logits_shape(self):
        model = build(ModelSpec(**SMALL), seed=0)
        with T.no_grad():
            y = model.forward(_x((1, 3, 64, 64)))
        assert y.shape == (1, 5, 64, 64)

    def test_19_class_contract(self):
        model = build(ModelSpec(width_mult=0.25, decoder_width=32,
                                spp_grids=(1, 2), num_classes=19), seed=0)
        with T.no_grad():
            y = model.forward(_x((1, 3, 64, 64)))
        assert y.shape == (1, 19, 64, 64)

    def test_indivisible_dims_rejected(self):
        model = build(ModelSpec(**SMALL), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            model.forward(_x((1, 3, 60, 64)))

    def test_lateral_flag_off_builds_no_lateral_convs(self):
        model = build(ModelSpec(**SMALL, lateral=False), seed=0)
        assert all(step.lateral is None for step in model.decoder.steps)
        with T.no_grad():
            y = model.forward(_x((1, 3, 64, 64)))
        assert y.shape == (1, 5, 64, 64)

    def test_zeroed_projections_reduce_to_blend_chain(self):
        """With all lateral and SPP-level projections zeroed, the model equals
        the pure blend-chain over the resized coarse path."""
        spec = ModelSpec(**SMALL)
        model = build(spec, seed=0)
        for name, p in model.named_parameters():
            if ".lateral." in name and name.endswith("conv.weight"):
                p.data[:] = 0.0
        twin = build(ModelSpec(**{**SMALL, "lateral": False}), seed=0)
        # align the shared parameters (twin lacks the lateral convs)
        twin_names = dict(twin.named_parameters())
        for name, p in model.named_parameters():
            if name in twin_names:
                twin_names[name].data[:] = p.data
        x = _x((1, 3, 64, 64))
        with T.no_grad():
            np.testing.assert_allclose(model.forward(x).data, twin.forward(x).data, atol=1e-6)


class TestPyramid:
    def test_logits_shape(self):
        model = build(ModelSpec(**{**SMALL, "spp_grids": (1,)}, pyramid_levels=2), seed=0)
        with T.no_grad():
            y = model.forward(_x((1, 3, 128, 128)))
        assert y.shape == (1, 5, 128, 128)

    def test_dims_must_divide_64(self):
        model = build(ModelSpec(**{**SMALL, "spp_grids": (1,)}, pyramid_levels=2), seed=0)
        with pytest.raises(ValueError, match="divisible by 64"):
            model.forward(_x((1, 3, 96, 96)))

    def test_four_upsample_steps_last_without_lateral(self):
        model = build(ModelSpec(**{**SMALL, "spp_grids": (1,)}, pyramid_levels=2), seed=0)
        steps = model.decoder.steps
        assert len(steps) == 4
        assert all(s.lateral is not None for s in steps[:3])
        assert steps[3].lateral is None

    def test_encoder_weights_shared_across_levels(self):
        """Perturbing one encoder weight changes the features of both pyramid
        levels: the two passes reference the identical parameter objects."""
        model = build(ModelSpec(**{**SMALL, "spp_grids": (1,)}, pyramid_levels=2), seed=0)
        x = _x((1, 3, 128, 128))

        def run_taps():
            with T.no_grad():
                full = model.backbone.forward(x)
                half = model.backbone.forward(T.resize(x, 64, 64, "bilinear"))
            return full.t32.data.copy(), half.t32.data.copy()

        full_a, half_a = run_taps()
        w = dict(model.named_parameters())["backbone.stem.conv.weight"]
        w.data += 0.05
        full_b, half_b = run_taps()
        assert not np.allclose(full_a, full_b)
        assert not np.allclose(half_a, half_b)

    def test_parameter_count_exceeds_single_scale_modestly(self):
        single = build(ModelSpec(**SMALL), seed=0).parameter_count()
        pyr = build(ModelSpec(**SMALL, pyramid_levels=2), seed=0).parameter_count()
        assert pyr > single
        assert (pyr - single) / single < 0.25


class TestFuseBn:
    def test_identity_bn_leaves_conv_unchanged(self):
        unit = ConvBNAct(_rng_gen(), 4, 4, 3, padding=1, act=None)
        unit.bn.eps = 0.0
        w_before = unit.conv.weight.data.copy()
        unit.fuse_bn_()
        np.testing.assert_allclose(unit.conv.weight.data, w_before, rtol=1e-6)
        np.testing.assert_allclose(unit.conv.bias.data, 0.0, atol=1e-7)

    def test_scalar_closed_form(self):
        unit = ConvBNAct(_rng_gen(), 1, 1, 1, act=None, bias=True, dtype=np.float64)
        unit.conv.weight.data[:] = 2.0
        unit.conv.bias.data[:] = 1.0
        unit.bn.gamma.data[:] = 3.0
        unit.bn.beta.data[:] = 0.5
        unit.bn.running_mean[:] = 1.0
        unit.bn.running_var[:] = 4.0
        unit.bn.eps = 0.0
        unit.fuse_bn_()
        assert unit.conv.weight.data.item() == pytest.approx(3.0)
        assert unit.conv.bias.data.item() == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_full_model_outputs_preserved(self, seed):
        model = build(ModelSpec(**SMALL), seed=seed)
        # populate running stats from data: the state fusion actually sees
        rng = np.random.default_rng(seed + 1)
        model.train(True)
        with T.no_grad():
            for _ in range(3):
                model.forward(Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32)))
        model.train(False)
        fused = fuse_bn(model)
        assert fused.fused and not model.fused
        x = _x((1, 3, 64, 64), seed=seed)
        with T.no_grad():
            a = model.forward(x).data
            b = fused.forward(x).data
        assert np.abs(a - b).max() < 1e-4

    def test_fused_model_has_no_bn_tensors(self):
        fused = fuse_bn(build(ModelSpec(**SMALL), seed=0))
        names = [n for n, _ in fused.named_parameters()]
        assert not any(".bn." in n for n in names)
        assert any(n.endswith("blend.conv.bias") for n in names)

    def test_original_model_untouched(self):
        model = build(ModelSpec(**SMALL), seed=0)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        fuse_bn(model)
        for n, p in model.named_parameters():
            assert np.array_equal(before[n], p.data), n

    def test_bare_bn_rejected(self):
        class Lonely(Module):
            def __init__(self):
                super().__init__()
                self.bn = BatchNorm2d(4)

        with pytest.raises(FusionError, match="preceding convolution"):
            fuse_bn(Lonely())

    def test_calibrate_bn_stats_captures_batch_statistics(self):
        from swiftseg.seghead import calibrate_bn_stats
        model = build(ModelSpec(**SMALL), seed=0)
        x = _x((2, 3, 64, 64), seed=9)
        calibrate_bn_stats(model, x)
        assert not model.training
        # stem buffers now hold the batch statistics of the stem conv output
        with T.no_grad():
            stem_out = model.backbone.stem.conv.forward(x)
        np.testing.assert_allclose(model.backbone.stem.bn.running_mean,
                                   stem_out.data.mean(axis=(0, 2, 3)), rtol=1e-4)
        # momentum restored: a later training pass blends, not replaces
        assert all(bn_mom == pytest.approx(0.1) for bn_mom in
                   [model.backbone.stem.bn.momentum, model.spp.fuse.bn.momentum])
