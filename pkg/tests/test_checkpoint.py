import struct

import pytest
import torch

from conftest import ALL_METHODS, random_adapter, random_weights
from gainlab import checkpoint as ckpt_io
from gainlab.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, CheckpointError, CheckpointVersionError


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_plain_round_trip_is_bitwise(tmp_path, dtype):
    w = random_weights(dtype=dtype)
    ck = Checkpoint(w, None, {"kind": "pretrained", "step": 3})
    ckpt_io.save(tmp_path / "a.ckpt", ck)
    back = ckpt_io.load(tmp_path / "a.ckpt")
    assert back.bitwise_equal(ck) and back.adapter is None
    assert back.weights.dtype == dtype
    assert ckpt_io.to_bytes(back) == ckpt_io.to_bytes(ck)


@pytest.mark.parametrize("method", ALL_METHODS)
def test_adapter_round_trip(tmp_path, method):
    w = random_weights()
    ad = random_adapter(method, w, seed=2)
    ck = Checkpoint(w, ad, {"kind": "adapter"})
    path = tmp_path / f"{method}.ckpt"
    ckpt_io.save(path, ck)
    back = ckpt_io.load(path)
    assert back.bitwise_equal(ck)
    assert back.adapter.n_units == ad.n_units
    assert all(p.requires_grad for p in back.adapter.params.values())


def test_header_layout():
    data = ckpt_io.to_bytes(Checkpoint(random_weights(), None, {}))
    assert data[:8] == MAGIC
    assert struct.unpack_from("<I", data, 8)[0] == FORMAT_VERSION


def _corrupt(data: bytes, pos: int) -> bytes:
    return data[:pos] + bytes([data[pos] ^ 0xFF]) + data[pos + 1:]


def test_rejections():
    data = ckpt_io.to_bytes(Checkpoint(random_weights(), None, {}))
    with pytest.raises(CheckpointError, match="magic"):
        ckpt_io.from_bytes(b"NOTACKPT" + data[8:])
    bumped = data[:8] + struct.pack("<I", FORMAT_VERSION + 1) + data[12:]
    with pytest.raises(CheckpointVersionError):
        ckpt_io.from_bytes(bumped)
    with pytest.raises(CheckpointError, match="checksum"):
        ckpt_io.from_bytes(_corrupt(data, len(data) // 2))
    with pytest.raises(CheckpointError):
        ckpt_io.from_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError):
        ckpt_io.from_bytes(b"")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "nope.ckpt")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "sub" / "x.bin"
    ckpt_io.atomic_write_bytes(path, b"one")
    ckpt_io.atomic_write_bytes(path, b"two")
    assert path.read_bytes() == b"two"
    assert [p.name for p in path.parent.iterdir()] == ["x.bin"]


def test_failed_write_keeps_old_file(tmp_path, monkeypatch):
    path = tmp_path / "x.bin"
    ckpt_io.atomic_write_bytes(path, b"old")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(ckpt_io.os, "replace", boom)
    with pytest.raises(OSError):
        ckpt_io.atomic_write_bytes(path, b"new")
    assert path.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]


def test_identical_inputs_give_identical_bytes():
    a = ckpt_io.to_bytes(Checkpoint(random_weights(seed=4), random_adapter("gain", random_weights(seed=4)), {"s": 1}))
    b = ckpt_io.to_bytes(Checkpoint(random_weights(seed=4), random_adapter("gain", random_weights(seed=4)), {"s": 1}))
    assert a == b
