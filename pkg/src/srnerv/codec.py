"""Weight quantization, entropy coding, and the bitstream container.

Symmetric per-tensor uniform quantization to 2^b - 1 integer symbols,
add-one-smoothed per-tensor frequency tables, and a 32-bit carry-propagating
range coder. The coder pair is exact-length: decoding n symbols consumes
precisely the bytes their encoding produced, so the payload is the plain
concatenation of per-tensor codes with no framing.

Bitstream layout (all multi-byte integers little-endian):

    magic "SRNV" | version u8=1
    config u16 x10: M L C K r grid_T grid_H0 grid_W0 grid_C0 share_mode
    config u32 x3:  T H W
    bits u16
    directory count u16, then per tensor:
        name_len u8 + name | rank u8 + rank x u32 extents | scale f32
        mask flag u8 [+ run count u32 + runs u32..., alternating from 'kept']
        (2^bits - 1) x u32 smoothed symbol counts
    payload length u64 + payload bytes
    CRC-32 u32 (poly 0xEDB88320) over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ParameterStore, SHARE_MODES, generate, param_names, param_shape
from .tensor import Tensor

MAGIC = b"SRNV"
VERSION = 1
MAX_TABLE_TOTAL = 1 << 16  # keeps range-coder precision loss negligible
MAX_TENSOR_ELEMS = 1 << 28


class BitstreamError(ValueError):
    """Base for all bitstream parse/format failures."""


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class ChecksumMismatchError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class CorruptStreamError(BitstreamError):
    pass


# ---------------------------------------------------------------------------
# quantization


def symbol_bound(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_array(values: np.ndarray, mask: np.ndarray | None, bits: int):
    """Symmetric uniform quantization; returns (full symbol array, f32 scale).

    scale = maxabs/(2^(b-1)-1) over unmasked entries; symbols are
    round-half-away-from-zero(w/scale) clamped to the symmetric range.
    Masked positions get symbol 0.
    """
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    bound = symbol_bound(bits)
    vals = np.asarray(values, dtype=np.float64)
    active = vals if mask is None else vals[~mask]
    maxabs = float(np.max(np.abs(active))) if active.size else 0.0
    scale = np.float32(maxabs / bound)
    if scale == 0.0:
        symbols = np.zeros(vals.shape, dtype=np.int32)
    else:
        symbols = np.clip(_round_half_away(vals / float(scale)), -bound, bound).astype(np.int32)
    if mask is not None:
        symbols[mask] = 0
    return symbols, scale


def dequantize_array(symbols: np.ndarray, scale: np.float32,
                     mask: np.ndarray | None) -> np.ndarray:
    out = (np.float32(scale) * symbols.astype(np.float32)).astype(np.float32)
    if mask is not None:
        out[mask] = 0.0
    return out


def fake_quantize(values: np.ndarray, mask: np.ndarray | None, bits: int) -> np.ndarray:
    """quantize -> dequantize round trip as used during QAT."""
    symbols, scale = quantize_array(values, mask, bits)
    return dequantize_array(symbols, scale, mask)


@dataclass
class QuantizedTensor:
    name: str
    shape: tuple[int, ...]
    scale: np.float32
    symbols: np.ndarray  # emitted (unmasked) symbols only, C-order
    mask: np.ndarray | None  # bool, True = pruned, no symbol emitted

    def dequantize(self) -> np.ndarray:
        full = np.zeros(self.shape, dtype=np.int32)
        if self.mask is None:
            full = self.symbols.reshape(self.shape)
        else:
            full[~self.mask] = self.symbols
        return dequantize_array(full, self.scale, self.mask)


@dataclass
class FreqTable:
    """Add-one-smoothed symbol counts over the full symmetric alphabet."""

    counts: np.ndarray  # int64, length 2^bits - 1, every entry >= 1
    bits: int

    @classmethod
    def from_symbols(cls, symbols: np.ndarray, bits: int) -> "FreqTable":
        bound = symbol_bound(bits)
        hist = np.bincount((np.asarray(symbols) + bound).astype(np.int64),
                           minlength=2 * bound + 1)
        counts = hist.astype(np.int64) + 1
        while counts.sum() >= MAX_TABLE_TOTAL:
            counts = (counts + 1) // 2
        return cls(counts, bits)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    def validate(self):
        if len(self.counts) != 2 ** self.bits - 1:
            raise CorruptStreamError("frequency table has wrong alphabet size")
        if np.any(self.counts < 1):
            raise CorruptStreamError("frequency table contains a zero count")
        if self.total >= MAX_TABLE_TOTAL:
            raise CorruptStreamError("frequency table total too large for the coder")
        return self


@dataclass
class QuantizedModel:
    config: ModelConfig
    bits: int
    tensors: list[QuantizedTensor]
    tables: dict[str, FreqTable]


def quantize_store(store: ParameterStore, bits: int) -> QuantizedModel:
    tensors = []
    tables = {}
    for name in store.names():
        w = store.params[name].values
        mask = store.masks.get(name)
        symbols, scale = quantize_array(w, mask, bits)
        emitted = symbols[~mask] if mask is not None else symbols.reshape(-1)
        qt = QuantizedTensor(name, tuple(w.shape), scale, emitted.copy(),
                             None if mask is None else mask.copy())
        tensors.append(qt)
        tables[name] = FreqTable.from_symbols(emitted, bits)
    return QuantizedModel(store.config, bits, tensors, tables)


def store_from_quantized(qmodel: QuantizedModel) -> ParameterStore:
    params = {}
    masks = {}
    for qt in qmodel.tensors:
        params[qt.name] = Tensor(qt.dequantize())
        if qt.mask is not None:
            masks[qt.name] = qt.mask.copy()
    return ParameterStore(qmodel.config, params, masks)


def estimate_rate(qmodel: QuantizedModel) -> dict[str, float]:
    """Ideal codelength in bits under the per-tensor tables.

    Split two ways so the parts sum exactly to the total: "cm" covers the
    shared channel-mixing sets, "sm" the scale-specific remainder (spatial
    sets, grid, stem, head).
    """
    out = {"sm_bits": 0.0, "cm_bits": 0.0, "total_bits": 0.0}
    for qt in qmodel.tensors:
        table = qmodel.tables[qt.name]
        bound = symbol_bound(qmodel.bits)
        hist = np.bincount((qt.symbols + bound).astype(np.int64),
                           minlength=2 * bound + 1)
        if np.any((hist > 0) & (table.counts <= 0)):
            raise ValueError(f"{qt.name}: emitted symbol has zero probability")
        probs = table.counts / table.total
        bits = float(np.sum(hist * -np.log2(probs)))
        out["cm_bits" if qt.name.startswith("cm.") else "sm_bits"] += bits
    out["total_bits"] = out["sm_bits"] + out["cm_bits"]
    return out


# ---------------------------------------------------------------------------
# range coder (LZMA-style: 32-bit range, 33-bit low with carry propagation)

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class _RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low32 = self.low & _MASK32
        carry = self.low >> 32
        if low32 < 0xFF000000 or carry:
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = low32 >> 24
        self.cache_size += 1
        self.low = (low32 << 8) & _MASK32

    def encode(self, start: int, size: int, total: int):
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _RangeDecoder:
    """Mirrors the encoder byte for byte; never reads past what was written."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos
        self.range = _MASK32
        self.code = 0
        self._byte()  # priming byte from the encoder's initial cache
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("truncated stream: range-coded payload ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cum: np.ndarray, total: int) -> int:
        r = self.range // total
        val = min(self.code // r, total - 1)
        sym = int(np.searchsorted(cum, val, side="right")) - 1
        start = int(cum[sym])
        size = int(cum[sym + 1]) - start
        self.code -= r * start
        self.range = r * size
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8
        return sym


def arith_encode(symbols: np.ndarray, table: FreqTable) -> bytes:
    """Range-encode signed symbols under ``table``. Empty input -> empty code."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return b""
    table.validate()
    bound = symbol_bound(table.bits)
    cum = table.cumulative()
    total = table.total
    enc = _RangeEncoder()
    for s in symbols.reshape(-1):
        idx = int(s) + bound
        enc.encode(int(cum[idx]), int(cum[idx + 1] - cum[idx]), total)
    return enc.finish()


def arith_decode(data: bytes, table: FreqTable, n: int, pos: int = 0):
    """Decode ``n`` symbols starting at ``pos``; returns (symbols, end position)."""
    if n == 0:
        return np.zeros(0, dtype=np.int32), pos
    table.validate()
    bound = symbol_bound(table.bits)
    cum = table.cumulative()
    total = table.total
    dec = _RangeDecoder(data, pos)
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        out[i] = dec.decode(cum, total) - bound
    return out, dec.pos


# ---------------------------------------------------------------------------
# container


_CONFIG_FMT = "<10H3I"


def pack_model_config(config: ModelConfig) -> bytes:
    return struct.pack(_CONFIG_FMT, config.M, config.L, config.C, config.K,
                       config.r, config.grid_T, config.grid_H0, config.grid_W0,
                       config.grid_C0, SHARE_MODES.index(config.share_mode),
                       config.T, config.H, config.W)


def unpack_model_config(reader: "_Reader") -> ModelConfig:
    vals = reader.unpack(_CONFIG_FMT)
    if vals[9] >= len(SHARE_MODES):
        raise CorruptStreamError(f"unknown share mode code {vals[9]}")
    cfg = ModelConfig(M=vals[0], L=vals[1], C=vals[2], K=vals[3], r=vals[4],
                      grid_T=vals[5], grid_H0=vals[6], grid_W0=vals[7],
                      grid_C0=vals[8], share_mode=SHARE_MODES[vals[9]],
                      T=vals[10], H=vals[11], W=vals[12])
    try:
        cfg.validate()
    except ValueError as exc:
        raise CorruptStreamError(f"invalid model config in stream: {exc}") from exc
    return cfg


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"truncated stream: ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _encode_mask(mask: np.ndarray | None) -> bytes:
    if mask is None:
        return struct.pack("<B", 0)
    flat = mask.reshape(-1)
    runs = []
    value = False  # runs alternate starting from 'kept'
    i = 0
    while i < flat.size:
        j = i
        while j < flat.size and flat[j] == value:
            j += 1
        runs.append(j - i)
        value = not value
        i = j
    return struct.pack("<BI", 1, len(runs)) + struct.pack(f"<{len(runs)}I", *runs)


def _decode_mask(reader: _Reader, size: int) -> np.ndarray | None:
    (flag,) = reader.unpack("<B")
    if flag == 0:
        return None
    if flag != 1:
        raise CorruptStreamError(f"bad mask flag {flag}")
    (nruns,) = reader.unpack("<I")
    if nruns > size + 1:
        raise CorruptStreamError("mask run count exceeds tensor size")
    runs = reader.unpack(f"<{nruns}I")
    if sum(runs) != size:
        raise CorruptStreamError("mask runs do not cover the tensor")
    mask = np.zeros(size, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if value:
            mask[pos:pos + run] = True
        pos += run
        value = not value
    return mask


def serialize(store: ParameterStore, bits: int) -> bytes:
    """Quantize every tensor and emit the versioned container."""
    qmodel = quantize_store(store, bits)
    return serialize_quantized(qmodel)


def serialize_quantized(qmodel: QuantizedModel) -> bytes:
    head = bytearray()
    head += MAGIC
    head += struct.pack("<B", VERSION)
    head += pack_model_config(qmodel.config)
    head += struct.pack("<H", qmodel.bits)
    head += struct.pack("<H", len(qmodel.tensors))
    payload = bytearray()
    for qt in qmodel.tensors:
        name = qt.name.encode("ascii")
        head += struct.pack("<B", len(name)) + name
        head += struct.pack("<B", len(qt.shape))
        head += struct.pack(f"<{len(qt.shape)}I", *qt.shape)
        head += struct.pack("<f", float(qt.scale))
        head += _encode_mask(qt.mask)
        table = qmodel.tables[qt.name]
        head += struct.pack(f"<{len(table.counts)}I", *table.counts.tolist())
        payload += arith_encode(qt.symbols, table)
    head += struct.pack("<Q", len(payload))
    blob = bytes(head) + bytes(payload)
    return blob + struct.pack("<I", zlib.crc32(blob))


def parse(data: bytes) -> QuantizedModel:
    """Inverse of serialize; raises one of the enumerated errors on bad input."""
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise BadMagicError("not an SRNV bitstream")
    (version,) = reader.unpack("<B")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported bitstream version {version}")
    config = unpack_model_config(reader)
    (bits,) = reader.unpack("<H")
    if not 2 <= bits <= 8:
        raise CorruptStreamError(f"bits {bits} outside [2, 8]")
    (count,) = reader.unpack("<H")
    expected = param_names(config)
    if count != len(expected):
        raise CorruptStreamError(
            f"directory holds {count} tensors, config implies {len(expected)}")
    alphabet = 2 ** bits - 1
    tensors = []
    tables = {}
    for idx in range(count):
        (name_len,) = reader.unpack("<B")
        try:
            name = reader.take(name_len).decode("ascii")
        except UnicodeDecodeError as exc:
            raise CorruptStreamError("tensor name is not ascii") from exc
        if name != expected[idx]:
            raise CorruptStreamError(f"unexpected tensor {name!r} at slot {idx}")
        (rank,) = reader.unpack("<B")
        if rank > 8:
            raise CorruptStreamError(f"tensor rank {rank} too large")
        shape = tuple(reader.unpack(f"<{rank}I"))
        if shape != param_shape(config, name):
            raise CorruptStreamError(f"{name}: shape {shape} conflicts with config")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if size > MAX_TENSOR_ELEMS:
            raise CorruptStreamError(f"{name}: tensor too large")
        (scale,) = reader.unpack("<f")
        if not np.isfinite(scale) or scale < 0:
            raise CorruptStreamError(f"{name}: bad scale {scale}")
        mask = _decode_mask(reader, size)
        counts = np.array(reader.unpack(f"<{alphabet}I"), dtype=np.int64)
        table = FreqTable(counts, bits).validate()
        n_symbols = size - (int(mask.sum()) if mask is not None else 0)
        tensors.append(QuantizedTensor(name, shape, np.float32(scale),
                                       np.zeros(n_symbols, dtype=np.int32), mask))
        tables[name] = table
    (payload_len,) = reader.unpack("<Q")
    payload_start = reader.pos
    payload = reader.take(payload_len)
    (crc_stored,) = reader.unpack("<I")
    if reader.pos != len(data):
        raise CorruptStreamError(f"{len(data) - reader.pos} trailing bytes after checksum")
    if zlib.crc32(data[:payload_start + payload_len]) != crc_stored:
        raise ChecksumMismatchError("CRC-32 mismatch")
    pos = 0
    for qt in tensors:
        qt.symbols, pos = arith_decode(payload, tables[qt.name], len(qt.symbols), pos)
        bound = symbol_bound(bits)
        if np.any(np.abs(qt.symbols) > bound):
            raise CorruptStreamError(f"{qt.name}: symbol outside alphabet")
    if pos != payload_len:
        raise CorruptStreamError(f"payload has {payload_len - pos} undecoded bytes")
    return QuantizedModel(config, bits, tensors, tables)


def decode_video(data: bytes) -> np.ndarray:
    """Parse a bitstream and render every frame from the dequantized weights."""
    qmodel = parse(data)
    store = store_from_quantized(qmodel)
    return render_video(store)


def render_video(store: ParameterStore) -> np.ndarray:
    cfg = store.config
    frames = [generate(store, t).values.astype(np.float32) for t in range(cfg.T)]
    return np.stack(frames)
