"""Snapshot container: byte-exact round trips and corruption handling."""

import numpy as np
import pytest

from cledetect import engine
from cledetect.checkpoint import (
    MAGIC,
    load_checkpoint,
    load_network,
    save_checkpoint,
    save_network,
)
from cledetect.engine import build_network, forward
from cledetect.errors import DataFormatError


def _tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta": rng.normal(size=(7,)).astype(np.float32),
        "gamma": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }


def test_round_trip_preserves_values_and_meta(tmp_path):
    path = tmp_path / "snap.ckpt"
    tensors = _tensors()
    save_checkpoint(path, tensors, {"seed": 42, "step": 7, "note": "x"})
    loaded, meta = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == np.float32
    assert meta == {"seed": 42, "step": 7, "note": "x"}


def test_save_load_save_is_byte_identical(tmp_path):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, _tensors(5), {"seed": 5, "step": 1})
    loaded, meta = load_checkpoint(a)
    save_checkpoint(b, loaded, meta)
    assert a.read_bytes() == b.read_bytes()


def test_same_state_saves_identically(tmp_path):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, _tensors(1), {"z": 1, "a": 2})
    save_checkpoint(b, _tensors(1), {"a": 2, "z": 1})  # key order must not matter
    assert a.read_bytes() == b.read_bytes()


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, _tensors(), {})
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, _tensors(), {})
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_rejects_truncated_header(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(MAGIC[:4])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, _tensors(), {})
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_network_round_trip_preserves_inference(tmp_path):
    specs = [engine.conv(4), engine.relu(), engine.maxpool(2), engine.fc(2), engine.softmax()]
    net = build_network(specs, (8, 8, 1), np.random.default_rng(21))
    x = np.random.default_rng(1).normal(size=(2, 8, 8, 1)).astype(np.float32)
    y0, _ = forward(net, x)
    path = tmp_path / "net.ckpt"
    save_network(path, net, seed=21, step=60, extra={"lr": 0.01})
    restored, meta = load_network(path)
    assert restored.specs == net.specs
    assert restored.input_shape == net.input_shape
    for k in net.params:
        np.testing.assert_array_equal(restored.params[k], net.params[k])
    y1, _ = forward(restored, x)
    np.testing.assert_array_equal(y0, y1)
    assert meta["seed"] == 21 and meta["step"] == 60 and meta["lr"] == 0.01


def test_network_loader_rejects_plain_tensor_files(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, _tensors(), {"kind": "other"})
    with pytest.raises(DataFormatError):
        load_network(path)


def test_reserved_meta_keys_are_protected(tmp_path):
    net = build_network([engine.fc(2), engine.softmax()], (3,), np.random.default_rng(0))
    with pytest.raises(DataFormatError):
        save_network(tmp_path / "n.ckpt", net, seed=0, step=0, extra={"specs": []})
