"""Self-describing binary checkpoints with a bit-exact round trip.

Layout (all integers little-endian)::

    magic            8 bytes  b"GAINCKPT"
    version          u32
    header length    u64, then that many bytes of canonical JSON
    tensor table     base weights
    [tensor table]   adapter trainable tensors   (only if header["adapter"])
    [tensor table]   adapter frozen tensors      (only if header["adapter"])
    sha256           32 bytes over everything above

A tensor table is ``u32 count`` followed by entries of ``u16 name length``,
UTF-8 name, ``u8 ndim``, ``ndim x u64`` dims, ``u8`` precision tag and the
raw little-endian values.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gainlab.adapters import AdapterOptions, AdapterState, Method
from gainlab.model import ModelConfig, TransformerWeights

MAGIC = b"GAINCKPT"
FORMAT_VERSION = 1
_PRECISION = {torch.float32: (1, "<f4"), torch.float64: (2, "<f8"), torch.int64: (3, "<i8")}
_BY_TAG = {tag: (dtype, np_dtype) for dtype, (tag, np_dtype) in _PRECISION.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass
class Checkpoint:
    weights: TransformerWeights
    adapter: AdapterState | None = None
    provenance: dict = field(default_factory=dict)

    def bitwise_equal(self, other: "Checkpoint") -> bool:
        if not self.weights.bitwise_equal(other.weights) or self.provenance != other.provenance:
            return False
        if (self.adapter is None) != (other.adapter is None):
            return False
        return self.adapter is None or (self.adapter.bitwise_equal(other.adapter)
                                        and self.adapter.n_units == other.adapter.n_units
                                        and self.adapter.options == other.adapter.options)


def _write_table(buf: io.BytesIO, tensors: dict[str, torch.Tensor]):
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach()
        if t.dtype not in _PRECISION:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        tag, np_dtype = _PRECISION[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(struct.pack("<B", tag))
        buf.write(np.ascontiguousarray(t.cpu().numpy(), dtype=np_dtype).tobytes())


def _read(view: memoryview, pos: int, fmt: str):
    size = struct.calcsize(fmt)
    if pos + size > len(view):
        raise CheckpointError("truncated checkpoint")
    return struct.unpack_from(fmt, view, pos), pos + size


def _read_table(view: memoryview, pos: int) -> tuple[dict[str, torch.Tensor], int]:
    (count,), pos = _read(view, pos, "<I")
    out = {}
    for _ in range(count):
        (n,), pos = _read(view, pos, "<H")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (ndim,), pos = _read(view, pos, "<B")
        dims, pos = _read(view, pos, f"<{ndim}Q")
        (tag,), pos = _read(view, pos, "<B")
        if tag not in _BY_TAG:
            raise CheckpointError(f"{name}: unknown precision tag {tag}")
        dtype, np_dtype = _BY_TAG[tag]
        count_vals = int(np.prod(dims)) if dims else 1
        nbytes = count_vals * np.dtype(np_dtype).itemsize
        if pos + nbytes > len(view):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=np_dtype).reshape(dims).astype(np_dtype[1:])
        out[name] = torch.from_numpy(arr.copy()).to(dtype)
        pos += nbytes
    return out, pos


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {"model": ckpt.weights.config.to_dict(), "provenance": ckpt.provenance, "adapter": None}
    if ckpt.adapter is not None:
        a = ckpt.adapter
        header["adapter"] = {"method": a.method.value, "options": a.options.to_dict(), "n_units": a.n_units}
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", FORMAT_VERSION))
    hdr = canonical_json(header)
    body.write(struct.pack("<Q", len(hdr)))
    body.write(hdr)
    _write_table(body, dict(ckpt.weights.items()))
    if ckpt.adapter is not None:
        _write_table(body, ckpt.adapter.params)
        _write_table(body, ckpt.adapter.frozen)
    data = body.getvalue()
    return data + hashlib.sha256(data).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a gainlab checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checksum mismatch (corrupted checkpoint)")
    view = memoryview(payload)
    (hlen,), pos = _read(view, len(MAGIC) + 4, "<Q")
    header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    pos += hlen
    config = ModelConfig.from_dict(header["model"])
    tensors, pos = _read_table(view, pos)
    weights = TransformerWeights(config, tensors)
    adapter = None
    if header["adapter"] is not None:
        params, pos = _read_table(view, pos)
        frozen, pos = _read_table(view, pos)
        meta = header["adapter"]
        adapter = AdapterState(method=Method.parse(meta["method"]), config=config,
                               options=AdapterOptions.from_dict(meta["options"]),
                               params={k: v.requires_grad_(True) for k, v in params.items()},
                               frozen=frozen, n_units=int(meta["n_units"]), empty_dtype=weights.dtype)
    if pos != len(payload):
        raise CheckpointError("trailing bytes after the last table")
    return Checkpoint(weights, adapter, header["provenance"])


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, ckpt: Checkpoint):
    atomic_write_bytes(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
