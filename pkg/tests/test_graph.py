"""Model assembly determinism, the parameter namespace, and checkpoint io."""

import numpy as np
import pytest

import swiftseg as ss
from swiftseg.graph import ModelSpec, build, save, load, read_entries, CheckpointError
from swiftseg.layers import Module


SMALL = dict(width_mult=0.25, decoder_width=32, spp_grids=(1, 2), num_classes=5)


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec()
        assert spec.backbone == "resnet18"
        assert spec.decoder_width == 128
        assert spec.spp_grids == (1, 2, 4, 8)
        assert spec.pyramid_levels == 1
        assert spec.lateral

    @pytest.mark.parametrize("kw", [
        dict(backbone="densenet"),
        dict(pyramid_levels=3),
        dict(decoder_width=0),
        dict(num_classes=1),
        dict(interp="bicubic"),
        dict(spp_grids=(0, 2)),
        dict(width_mult=0.0),
    ])
    def test_invalid_specs_rejected(self, kw):
        with pytest.raises(ValueError):
            ModelSpec(**kw)


class TestBuild:
    def test_deterministic_given_seed(self):
        a = build(ModelSpec(**SMALL), seed=7)
        b = build(ModelSpec(**SMALL), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data), na

    def test_different_seeds_differ(self):
        a = build(ModelSpec(**SMALL), seed=1)
        b = build(ModelSpec(**SMALL), seed=2)
        same = all(np.array_equal(pa.data, pb.data)
                   for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()))
        assert not same

    def test_parameter_namespace(self):
        model = build(ModelSpec(**SMALL))
        names = set(dict(model.named_parameters()))
        assert "backbone.stem.conv.weight" in names
        assert "backbone.group1.block0.conv1.conv.weight" in names
        assert "backbone.group4.block1.conv2.bn.gamma" in names
        assert "spp.level1.conv.weight" in names
        assert "spp.level2.conv.weight" in names
        assert "spp.input_proj.conv.weight" in names
        assert "spp.fuse.conv.weight" in names
        assert "decoder.up1.lateral.conv.weight" in names
        assert "decoder.up3.blend.conv.weight" in names
        assert "decoder.classifier.weight" in names
        assert "decoder.classifier.bias" in names

    def test_bn_buffers_in_state(self):
        model = build(ModelSpec(**SMALL))
        state = model.state()
        assert "backbone.stem.bn.running_mean" in state
        assert "backbone.stem.bn.running_var" in state

    def test_init_statistics(self):
        model = build(ModelSpec(**SMALL), seed=0)
        state = dict(model.named_parameters())
        w = state["backbone.group4.block1.conv2.conv.weight"]
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert w.data.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.15)
        assert np.all(state["backbone.stem.bn.gamma"].data == 1.0)
        assert np.all(state["decoder.classifier.bias"].data == 0.0)

    def test_pyramid_shares_encoder_names(self):
        single = build(ModelSpec(**SMALL))
        pyr = build(ModelSpec(**SMALL, pyramid_levels=2))
        enc_single = {n for n, _ in single.named_parameters() if n.startswith("backbone.")}
        enc_pyr = {n for n, _ in pyr.named_parameters() if n.startswith("backbone.")}
        assert enc_single == enc_pyr

    def test_mobilenet_namespace(self):
        model = build(ModelSpec(backbone="mobilenetv2", **{k: v for k, v in SMALL.items()
                                                           if k != "width_mult"}, width_mult=0.5))
        names = set(dict(model.named_parameters()))
        assert "backbone.block0.depth.conv.weight" in names
        assert "backbone.block1.expand.conv.weight" in names


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = build(ModelSpec(**SMALL), seed=3)
        path = tmp_path / "m.swft"
        save(model, path)
        other = build(ModelSpec(**SMALL), seed=99)
        load(other, path)
        for (n, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
            assert np.array_equal(a.data, b.data), n
        for (n, a), (_, b) in zip(model.named_buffers(), other.named_buffers()):
            assert np.array_equal(a, b), n

    def test_dims_mismatch_names_offender(self, tmp_path):
        model = build(ModelSpec(**SMALL), seed=0)
        path = tmp_path / "m.swft"
        save(model, path)
        other = build(ModelSpec(**{**SMALL, "decoder_width": 16}), seed=0)
        with pytest.raises(CheckpointError, match="decoder.up1.blend.conv.weight"):
            load(other, path)

    def test_unknown_name_reported(self, tmp_path):
        model = build(ModelSpec(**SMALL), seed=0)
        state = dict(model.state())
        state["bogus.weight"] = np.zeros(3, np.float32)
        path = tmp_path / "m.swft"
        save(state, path)
        with pytest.raises(CheckpointError, match="unknown tensor 'bogus.weight'"):
            load(model, path)

    def test_missing_name_reported(self, tmp_path):
        model = build(ModelSpec(**SMALL), seed=0)
        state = dict(model.state())
        state.pop("decoder.classifier.bias")
        path = tmp_path / "m.swft"
        save(state, path)
        with pytest.raises(CheckpointError, match="missing from checkpoint"):
            load(model, path)

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "bad.swft"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="bad magic"):
            read_entries(path)

    def test_empty_model_roundtrip(self, tmp_path):
        empty = Module()
        path = tmp_path / "empty.swft"
        save(empty, path)
        assert read_entries(path) == {}
        load(empty, path)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "one.swft"
        save({"t": np.arange(6, dtype=np.float32).reshape(2, 3)}, path)
        blob = path.read_bytes()
        assert blob[:4] == b"SWFT"
        assert int.from_bytes(blob[4:8], "little") == 1   # version
        assert int.from_bytes(blob[8:12], "little") == 1  # entry count
        assert int.from_bytes(blob[12:16], "little") == 1  # name length
        assert blob[16:17] == b"t"
        assert blob[17] == 1  # dtype code float32
        assert blob[18] == 2  # rank
        dims = (int.from_bytes(blob[19:23], "little"), int.from_bytes(blob[23:27], "little"))
        assert dims == (2, 3)
        assert np.frombuffer(blob[27:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]

    def test_float64_roundtrip(self, tmp_path):
        path = tmp_path / "d.swft"
        arr = np.random.default_rng(0).standard_normal(5)
        save({"x": arr}, path)
        got = read_entries(path)["x"]
        assert got.dtype == np.float64
        assert np.array_equal(got, arr)
