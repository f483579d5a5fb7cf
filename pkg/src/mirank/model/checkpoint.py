"""SEMD model checkpoint format.

Layout (little-endian)::

    4 bytes   magic b"SEMD"
    u16       version (1)
    u32       length L of the architecture config
    L bytes   config as UTF-8 JSON (sorted keys)
    u32       tensor count
    per tensor, in the fixed order of ``tensor_order(config)``:
        u16   name length, then the UTF-8 name
        u8    ndim, then ndim x u32 extents
        f32   values, row-major

Parameters come first in stage order (see ``param_shapes``), then the BN
running statistics. The same model always serializes to the same bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from mirank.data.dataset import DataFormatError
from mirank.model.network import ArchConfig, ModelState, buffer_shapes, param_shapes

MAGIC = b"SEMD"
VERSION = 1


class CheckpointError(DataFormatError):
    pass


def tensor_order(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    return list(param_shapes(cfg).items()) + list(buffer_shapes(cfg).items())


def dumps(model: ModelState) -> bytes:
    buf = io.BytesIO()
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    order = tensor_order(model.config)
    buf.write(struct.pack("<I", len(order)))
    for name, shape in order:
        arr = model.params[name] if name in model.params else model.buffers[name]
        if arr.shape != shape:
            raise CheckpointError(f"{name} has shape {arr.shape}, config implies {shape}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> ModelState:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"not a SEMD checkpoint (magic {raw[:4]!r})")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("checkpoint truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"SEMD version {version}, this reader handles {VERSION}")
    cfg = ArchConfig.from_dict(json.loads(take(cfg_len).decode()))
    (count,) = struct.unpack("<I", take(4))
    order = tensor_order(cfg)
    if count != len(order):
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(order)}")
    params, buffers = {}, {}
    pnames = set(param_shapes(cfg))
    for name, shape in order:
        (nlen,) = struct.unpack("<H", take(2))
        got = take(nlen).decode()
        if got != name:
            raise CheckpointError(f"expected tensor {name!r}, found {got!r}")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tuple(dims) != shape:
            raise CheckpointError(f"{name}: stored shape {dims}, config implies {shape}")
        arr = np.frombuffer(take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4").reshape(dims)
        (params if name in pnames else buffers)[name] = arr.astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last tensor")
    return ModelState(cfg, params, buffers)


def save(model: ModelState, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> ModelState:
    return loads(Path(path).read_bytes())


def tensor_digests(model: ModelState) -> dict[str, str]:
    """SHA-256 per tensor, for frozen-parameter checks."""
    out = {}
    for name, arr in list(model.params.items()) + list(model.buffers.items()):
        out[name] = hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()
    return out
