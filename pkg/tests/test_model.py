import os

import numpy as np
import pytest

from densedenoise.checkpoint import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from densedenoise.model import ModelConfig, build, build_dncnn_ref
from densedenoise.tensor import Tensor

TABLE3 = {"v1": 382080, "v2": 133248, "dncnn_ref": 556032}


class TestWiring:
    def test_transition_input_channels_192(self):
        net = build(ModelConfig(variant="v1"))
        for trans in net.transitions:
            assert trans.spec.in_channels == 128 + 64 == 192
            assert trans.spec.out_channels == 64

    def test_graph_inventory(self):
        cfg = ModelConfig(variant="v1", pairs=6)
        net = build(cfg)
        assert len(net.blocks) == 6 and len(net.transitions) == 6
        assert net.first is not None and net.final is not None

    def test_tiny_forward_preserves_shape(self, rng):
        net = build(ModelConfig.tiny(), seed=0)
        x = Tensor(rng.random((1, 1, 16, 16)).astype(np.float32))
        assert net.forward(x, "train").shape == (1, 1, 16, 16)

    @pytest.mark.parametrize("variant", ["v1", "v2"])
    def test_shape_preserved_any_extent(self, rng, variant):
        net = build(ModelConfig.micro(variant), seed=0)
        for h, w in ((8, 8), (9, 13)):
            x = Tensor(rng.random((1, 1, h, w)).astype(np.float32))
            assert net.forward(x, "infer").shape == (1, 1, h, w)

    def test_v2_same_graph_different_conv_flavor(self):
        v1 = build(ModelConfig(variant="v1"))
        v2 = build(ModelConfig(variant="v2"))
        assert len(v1.layers) == len(v2.layers)
        assert [t.spec.in_channels for t in v1.transitions] == [
            t.spec.in_channels for t in v2.transitions
        ]
        # separable units appear only inside v2 dense blocks
        assert all(u.separable for b in v2.blocks for u in b.units)
        assert not any(u.separable for b in v1.blocks for u in b.units)

    def test_first_layer_feeds_every_transition(self, rng):
        """Perturbing only the first unit's output must move every
        transition layer's input, including the last pair's."""
        net = build(ModelConfig.micro(), seed=4)
        x = Tensor(rng.random((1, 1, 12, 12)).astype(np.float32))
        seen = []
        for trans in net.transitions:
            orig_forward = trans.forward
            seen.append([])

            def capture(t, mode, _orig=orig_forward, _slot=seen[-1]):
                _slot.append(t.data.copy())
                return _orig(t, mode)

            trans.forward = capture
        net.forward(x, "infer")
        net.first.bn.beta.value.data += 0.5
        net.forward(x, "infer")
        for slot in seen:
            assert not np.array_equal(slot[0], slot[1])


class TestDenoise:
    def test_zero_final_layer_is_identity(self, rng):
        net = build(ModelConfig.micro(), seed=0)
        net.final.weight.value.data[...] = 0.0
        net.final.bias.value.data[...] = 0.0
        y = Tensor(rng.random((1, 1, 10, 10)).astype(np.float32))
        assert np.array_equal(net.denoise(y).data, y.data)

    def test_denoise_deterministic(self, rng):
        net = build(ModelConfig.micro(), seed=1)
        y = Tensor(rng.random((1, 1, 10, 10)).astype(np.float32))
        assert np.array_equal(net.denoise(y).data, net.denoise(y).data)


class TestParameterCounts:
    @pytest.mark.parametrize("variant,target", sorted(TABLE3.items()))
    def test_within_one_percent_of_reference(self, variant, target):
        net = build_dncnn_ref() if variant == "dncnn_ref" else build(ModelConfig(variant=variant))
        total, breakdown = net.count_parameters()
        assert abs(total - target) / target <= 0.01
        assert total == sum(c for _, c in breakdown)

    def test_v2_reduction_ratio(self):
        v2, _ = build(ModelConfig(variant="v2")).count_parameters()
        ref, _ = build_dncnn_ref().count_parameters()
        assert round(1 - v2 / ref, 3) == 0.760

    def test_breakdown_entries_positive_and_named(self):
        total, breakdown = build(ModelConfig.tiny()).count_parameters()
        assert all(c > 0 for _, c in breakdown)
        assert len({n for n, _ in breakdown}) == len(breakdown)

    def test_dncnn_forward_and_residual_contract(self, rng):
        net = build_dncnn_ref(depth=5, width=8)
        y = Tensor(rng.random((1, 1, 9, 9)).astype(np.float32))
        assert net.forward(y, "infer").shape == (1, 1, 9, 9)
        net.tail.weight.value.data[...] = 0.0
        net.tail.bias.value.data[...] = 0.0
        assert np.array_equal(net.denoise(y).data, y.data)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="v3")
        with pytest.raises(ValueError):
            ModelConfig(pairs=0)
        with pytest.raises(ValueError):
            build_dncnn_ref(depth=2)


class TestCheckpoint:
    def _train_a_little(self, net, rng):
        for p in net.parameters():
            p.value.data += rng.standard_normal(p.value.shape).astype(np.float32) * 0.01
        # touch running stats so they are non-default
        net.forward(Tensor(rng.random((2, 1, 12, 12)).astype(np.float32)), "train")

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        net = build(ModelConfig.micro(), seed=5)
        self._train_a_little(net, rng)
        p1 = str(tmp_path / "a.ckpt")
        p2 = str(tmp_path / "b.ckpt")
        save_checkpoint(net, p1)
        net2 = load_checkpoint(p1)
        save_checkpoint(net2, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_denoise_bit_equal_after_reload(self, tmp_path, rng):
        net = build(ModelConfig.micro(), seed=6)
        self._train_a_little(net, rng)
        y = Tensor(rng.random((1, 1, 14, 14)).astype(np.float32))
        before = net.denoise(y).data.copy()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(net, path)
        after = load_checkpoint(path).denoise(y).data
        assert np.array_equal(before, after)

    def test_truncated_file_is_format_error(self, tmp_path):
        net = build(ModelConfig.micro(), seed=0)
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(net, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)
        assert not any(f.endswith(".tmp") for f in os.listdir(tmp_path))

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        open(path, "wb").write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        net = build(ModelConfig.micro(), seed=0)
        path = str(tmp_path / "v.ckpt")
        save_checkpoint(net, path)
        blob = bytearray(open(path, "rb").read())
        blob[4] = 99
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_shape_mismatch_detected(self, tmp_path):
        net = build(ModelConfig.micro(), seed=0)
        path = str(tmp_path / "s.ckpt")
        save_checkpoint(net, path)
        blob = bytearray(open(path, "rb").read())
        # corrupt the tensor count field (follows magic, version, config json)
        import json
        import struct

        cfg_len = struct.unpack("<I", blob[8:12])[0]
        off = 12 + cfg_len
        struct.pack_into("<I", blob, off, 3)
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)
