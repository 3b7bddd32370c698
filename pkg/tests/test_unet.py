"""Network assembly tests: architecture shapes, gradients, checkpoints."""
from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from ldct import nnops, unet
from ldct.errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolation,
)

from conftest import unet_gradcheck_worst_error


def tiny_params(depth=1, base=4, size=16, seed=0, dtype=np.float64):
    cfg = unet.UNetConfig(depth=depth, base_channels=base, input_size=size)
    return unet.build(cfg, nnops.make_rng(seed), dtype=dtype)


class TestBuild:
    def test_depth1_base4_hand_enumerated(self):
        # hand enumeration of the depth-1, base-4, bottleneck-64 architecture
        cfg = unet.UNetConfig(depth=1, base_channels=4, input_size=16)
        params = unet.build(cfg, nnops.make_rng(0))
        expected = {
            "enc0.conv1.w": (4, 1, 3, 3), "enc0.conv1.b": (4,),
            "enc0.conv2.w": (4, 4, 3, 3), "enc0.conv2.b": (4,),
            "bottleneck.conv1.w": (8, 4, 3, 3), "bottleneck.conv1.b": (8,),
            "bottleneck.conv2.w": (8, 8, 3, 3), "bottleneck.conv2.b": (8,),
            "bottleneck.proj.w": (64, 8, 1, 1), "bottleneck.proj.b": (64,),
            "dec0.up.w": (64, 4, 2, 2), "dec0.up.b": (4,),
            "dec0.conv1.w": (4, 8, 3, 3), "dec0.conv1.b": (4,),
            "dec0.conv2.w": (4, 4, 3, 3), "dec0.conv2.b": (4,),
            "head.w": (1, 4, 1, 1), "head.b": (1,),
        }
        assert list(params.tensors.keys()) == list(expected.keys())
        for name, shape in expected.items():
            assert params.tensors[name].shape == shape, name

    def test_same_seed_identical(self):
        a = tiny_params(seed=3)
        b = tiny_params(seed=3)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_indivisible_input_size_rejected(self):
        with pytest.raises(ContractViolation, match="divisible"):
            unet.UNetConfig(depth=2, input_size=15).validate()

    def test_biases_zero(self):
        params = tiny_params()
        for name, tensor in params.tensors.items():
            if name.endswith(".b"):
                assert not tensor.any()


class TestForward:
    def test_output_shape_matches_input(self):
        params = tiny_params(depth=2, size=16)
        x = nnops.make_rng(1).standard_normal((3, 1, 16, 16))
        y, _ = unet.forward(params, x)
        assert y.shape == x.shape

    def test_zero_params_zero_input_zero_output(self):
        cfg = unet.UNetConfig(depth=1, base_channels=2, input_size=8)
        params = unet.build(cfg, nnops.make_rng(0), dtype=np.float64)
        for name in params.tensors:
            params.tensors[name][:] = 0.0
        y, _ = unet.forward(params, np.zeros((1, 1, 8, 8)))
        assert not y.any()

    def test_rejects_bad_input(self):
        params = tiny_params(depth=2)
        with pytest.raises(ContractViolation, match="divisible"):
            unet.forward(params, np.zeros((1, 1, 15, 15)))
        with pytest.raises(ContractViolation, match="1xHxW"):
            unet.forward(params, np.zeros((1, 2, 16, 16)))

    def test_fully_convolutional_interior_constancy(self):
        # depth-1 contamination band from zero padding is exactly 8 px
        # (conv block 2 -> pool 1 -> bottleneck 4 -> upconv 6 -> convs 8),
        # so >= 8 px from each border a constant image maps to a constant.
        cfg = unet.UNetConfig(depth=1, base_channels=4, input_size=64)
        params = unet.build(cfg, nnops.make_rng(5), dtype=np.float64)
        y, _ = unet.forward(params, np.full((1, 1, 128, 128), 0.7))
        interior = y[0, 0, 8:-8, 8:-8]
        assert np.ptp(interior) <= 1e-5

    def test_deterministic(self):
        params = tiny_params(depth=2)
        x = nnops.make_rng(2).standard_normal((1, 1, 16, 16))
        y1, _ = unet.forward(params, x)
        y2, _ = unet.forward(params, x)
        assert np.array_equal(y1, y2)


class TestBackward:
    def test_zero_grad_y(self):
        params = tiny_params()
        x = nnops.make_rng(4).standard_normal((1, 1, 16, 16))
        _, cache = unet.forward(params, x)
        grads = unet.backward(params, cache, np.zeros((1, 1, 16, 16)))
        assert set(grads) == set(params.tensors)
        assert all(not g.any() for g in grads.values())

    def test_linearity_in_grad_y(self):
        params = tiny_params()
        x = nnops.make_rng(6).standard_normal((2, 1, 16, 16))
        gy = nnops.make_rng(7).standard_normal((2, 1, 16, 16))
        _, c1 = unet.forward(params, x)
        g1 = unet.backward(params, c1, gy)
        _, c2 = unet.forward(params, x)
        g2 = unet.backward(params, c2, 2.0 * gy)
        for name in g1:
            np.testing.assert_allclose(g2[name], 2.0 * g1[name], rtol=1e-12)

    def test_stale_cache_rejected(self):
        params = tiny_params()
        x = nnops.make_rng(8).standard_normal((1, 1, 16, 16))
        _, cache = unet.forward(params, x)
        gy = np.zeros((1, 1, 16, 16))
        unet.backward(params, cache, gy)
        with pytest.raises(ContractViolation, match="stale"):
            unet.backward(params, cache, gy)

    def test_skip_fork_gradient_sums_both_paths(self):
        # on a depth-1 net, the gradient reaching the skip activation is the
        # concat-branch gradient plus the pool-branch gradient; verify against
        # finite differences through the whole network (conftest helper).
        # seed chosen so no ReLU pre-activation sits inside the difference
        # step (central differences are invalid across the kink).
        worst = unet_gradcheck_worst_error(depth=1, base=2, size=8, seed=14)
        assert worst <= 1e-5

    def test_full_network_gradient_check(self):
        worst = unet_gradcheck_worst_error(depth=2, base=4, size=16, seed=77)
        assert worst <= 1e-5


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = tiny_params(depth=2, base=3, size=16, dtype=np.float32)
        path = tmp_path / "net.ckpt"
        unet.save_checkpoint(params, path)
        loaded = unet.load_checkpoint(path)
        assert loaded.config == params.config
        assert loaded.names == params.names
        for name in params.tensors:
            assert loaded.tensors[name].dtype == params.tensors[name].dtype
            assert np.array_equal(loaded.tensors[name], params.tensors[name])

    def test_truncated_file(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "net.ckpt"
        unet.save_checkpoint(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-20])
        with pytest.raises(CheckpointTruncatedError, match="truncated"):
            unet.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointFormatError):
            unet.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "net.ckpt"
        unet.save_checkpoint(params, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            unet.load_checkpoint(path)

    def test_edited_header_shape_disagreement(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "net.ckpt"
        unet.save_checkpoint(params, path)
        blob = path.read_bytes()
        header_len = struct.unpack("<I", blob[8:12])[0]
        header = json.loads(blob[12:12 + header_len])
        for entry in header["params"]:
            if entry["name"] == "enc0.conv1.w":
                entry["shape"][0] += 1  # claim one extra output channel
        new_header = json.dumps(header, sort_keys=True).encode()
        patched = (blob[:8] + struct.pack("<I", len(new_header)) + new_header
                   + blob[12 + header_len:])
        path.write_bytes(patched)
        with pytest.raises(CheckpointShapeError, match="enc0.conv1.w"):
            unet.load_checkpoint(path)
