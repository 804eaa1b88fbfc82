"""Float checkpoint container for fitted parameter stores.

Layout (little-endian): magic "SRNC" | version u8=1 | model config (same
packing as the bitstream header) | tensor count u16 | per tensor:
name_len u8 + name, rank u8 + u32 extents, mask flag u8 (+ RLE runs),
byte length u32 + raw float32 data | CRC-32 u32 over everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .codec import (BadMagicError, ChecksumMismatchError, CorruptStreamError,
                    UnsupportedVersionError, _Reader, _encode_mask, _decode_mask,
                    pack_model_config, unpack_model_config)
from .model import ParameterStore, param_names, param_shape
from .tensor import Tensor

MAGIC = b"SRNC"
VERSION = 1


def dump_store(store: ParameterStore) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<B", VERSION)
    out += pack_model_config(store.config)
    names = store.names()
    out += struct.pack("<H", len(names))
    for name in names:
        raw = np.ascontiguousarray(store.params[name].values, dtype=np.float32).tobytes()
        nb = name.encode("ascii")
        shape = store.params[name].shape
        out += struct.pack("<B", len(nb)) + nb
        out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        out += _encode_mask(store.masks.get(name))
        out += struct.pack("<I", len(raw)) + raw
    return bytes(out) + struct.pack("<I", zlib.crc32(bytes(out)))


def load_store(data: bytes, trainable: bool = True) -> ParameterStore:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise BadMagicError("not an SRNC checkpoint")
    (version,) = reader.unpack("<B")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    config = unpack_model_config(reader)
    (count,) = reader.unpack("<H")
    expected = param_names(config)
    if count != len(expected):
        raise CorruptStreamError(f"checkpoint holds {count} tensors, expected {len(expected)}")
    params = {}
    masks = {}
    for idx in range(count):
        (name_len,) = reader.unpack("<B")
        name = reader.take(name_len).decode("ascii", errors="replace")
        if name != expected[idx]:
            raise CorruptStreamError(f"unexpected tensor {name!r} at slot {idx}")
        (rank,) = reader.unpack("<B")
        shape = tuple(reader.unpack(f"<{rank}I"))
        if shape != param_shape(config, name):
            raise CorruptStreamError(f"{name}: shape {shape} conflicts with config")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        mask = _decode_mask(reader, size)
        (nbytes,) = reader.unpack("<I")
        if nbytes != 4 * size:
            raise CorruptStreamError(f"{name}: payload is {nbytes} bytes, expected {4 * size}")
        vals = np.frombuffer(reader.take(nbytes), dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(vals, requires_grad=trainable)
        if mask is not None:
            masks[name] = mask
    (crc_stored,) = reader.unpack("<I")
    if reader.pos != len(data):
        raise CorruptStreamError("trailing bytes after checkpoint checksum")
    if zlib.crc32(data[:-4]) != crc_stored:
        raise ChecksumMismatchError("checkpoint CRC-32 mismatch")
    store = ParameterStore(config, params, masks)
    store.apply_masks()
    return store


def save_checkpoint(store: ParameterStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_store(store))


def load_checkpoint(path, trainable: bool = True) -> ParameterStore:
    with open(path, "rb") as fh:
        return load_store(fh.read(), trainable=trainable)
