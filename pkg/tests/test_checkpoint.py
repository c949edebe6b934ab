"""Checkpoint container: byte determinism, exact round trips, corruption."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from moeflow import checkpoint, moefm, nnet
from moeflow.errors import CheckpointFormatError, ValidationError


@pytest.fixture
def vfm_net():
    return nnet.field_net(2, 2, hidden_width=8, hidden_layers=2, seed=1)


@pytest.fixture
def moe_model():
    return moefm.init_moe_model(dim=2, k=3, sigma=0.25, hidden_width=8, hidden_layers=2, seed=4)


def test_vfm_round_trip_exact(tmp_path, vfm_net):
    path = tmp_path / "field.ckpt"
    checkpoint.save_checkpoint(path, vfm_net, seed=17)
    cp = checkpoint.load_checkpoint(path)
    assert cp.kind == "vfm" and cp.seed == 17
    net = cp.net
    assert net.layer_sizes == vfm_net.layer_sizes
    assert net.activation == vfm_net.activation
    for got, want in zip(net.weights + net.biases, vfm_net.weights + vfm_net.biases):
        assert_array_equal(got, want)


def test_moefm_round_trip_exact(tmp_path, moe_model):
    path = tmp_path / "mixture.ckpt"
    checkpoint.save_checkpoint(path, moe_model)
    cp = checkpoint.load_checkpoint(path)
    assert cp.kind == "moefm" and cp.seed is None
    model = cp.model
    assert model.sigma == moe_model.sigma
    assert model.num_experts == moe_model.num_experts
    for got, want in zip(model.experts + [model.gate], moe_model.experts + [moe_model.gate]):
        for g, w in zip(got.weights + got.biases, want.weights + want.biases):
            assert_array_equal(g, w)


def test_save_is_byte_deterministic(tmp_path, moe_model):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_checkpoint(a, moe_model, seed=0)
    checkpoint.save_checkpoint(b, moe_model, seed=0)
    assert a.read_bytes() == b.read_bytes()


def test_reload_then_save_reproduces_bytes(tmp_path, vfm_net):
    a = tmp_path / "a.ckpt"
    checkpoint.save_checkpoint(a, vfm_net, seed=3)
    reloaded = checkpoint.load_checkpoint(a)
    b = tmp_path / "b.ckpt"
    checkpoint.save_checkpoint(b, reloaded.payload, seed=3)
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic_rejected(tmp_path, vfm_net):
    path = tmp_path / "x.ckpt"
    checkpoint.save_checkpoint(path, vfm_net)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="magic"):
        checkpoint.load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path, vfm_net):
    path = tmp_path / "x.ckpt"
    checkpoint.save_checkpoint(path, vfm_net)
    blob = bytearray(path.read_bytes())
    blob[8:12] = np.uint32(99).tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="version 99"):
        checkpoint.load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path, moe_model):
    path = tmp_path / "x.ckpt"
    checkpoint.save_checkpoint(path, moe_model)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        checkpoint.load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path, vfm_net):
    path = tmp_path / "x.ckpt"
    checkpoint.save_checkpoint(path, vfm_net)
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        checkpoint.load_checkpoint(path)


def test_garbled_header_rejected(tmp_path, vfm_net):
    path = tmp_path / "x.ckpt"
    checkpoint.save_checkpoint(path, vfm_net)
    blob = bytearray(path.read_bytes())
    blob[16] = 0xFF  # inside the JSON header
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        checkpoint.load_checkpoint(path)


def test_non_finite_parameters_rejected_on_load(tmp_path, vfm_net):
    path = tmp_path / "x.ckpt"
    checkpoint.save_checkpoint(path, vfm_net)
    blob = bytearray(path.read_bytes())
    blob[-8:] = np.float64(np.nan).tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="invalid"):
        checkpoint.load_checkpoint(path)


def test_wrong_payload_type_rejected(tmp_path):
    with pytest.raises(ValidationError):
        checkpoint.save_checkpoint(tmp_path / "x.ckpt", {"weights": []})


def test_kind_accessors_guard(tmp_path, vfm_net, moe_model):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_checkpoint(p1, vfm_net)
    checkpoint.save_checkpoint(p2, moe_model)
    with pytest.raises(ValidationError):
        checkpoint.load_checkpoint(p1).model
    with pytest.raises(ValidationError):
        checkpoint.load_checkpoint(p2).net
