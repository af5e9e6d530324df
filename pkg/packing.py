"""
Compact storage of quantized models.

A layer quantized to ``n_values`` grid points needs only the digit index of
each weight. ``k = weights_per_byte(n)`` digits share one byte as a base-n
number (first weight least significant), which is where the 4k-fold memory
reduction against 32-bit weights comes from.

The LBQ1 container (see FORMAT.md) stores those payloads together with each
layer's scale, its 32-bit bias and every unquantized tensor verbatim, so a
loaded model reproduces the source model's inference outputs exactly.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from errors import BadMagic, CorruptPayload, OffGridValue, ShapeError, TruncatedFile, UnsupportedVersion
from models import FULL_PRECISION, Model, ModelConfig, ModelKind, build_model
from quantizer import grid_values

logger = logging.getLogger(__name__)

MAGIC = b"LBQ1"
FORMAT_VERSION = 1
MAX_N_VALUES = 256


class GridIndexMap:
    """Grid value <-> digit, digit = position in the ascending grid (0 is -1, n-1 is +1)."""

    def __init__(self, n_values: int):
        self.n_values = n_values
        self.values = grid_values(n_values).as_array()

    def to_digits(self, w_q: np.ndarray) -> np.ndarray:
        flat = np.asarray(w_q, dtype=np.float32).reshape(-1)
        digits = np.clip(np.searchsorted(self.values, flat), 0, self.n_values - 1)
        off_grid = np.flatnonzero(self.values[digits] != flat)
        if off_grid.size:
            index = int(off_grid[0])
            raise OffGridValue(index, float(flat[index]), self.n_values)
        return digits.astype(np.int64)

    def to_values(self, digits: np.ndarray) -> np.ndarray:
        return self.values[np.asarray(digits, dtype=np.int64)]


def _check_n_values(n_values: int) -> None:
    if not 2 <= n_values <= MAX_N_VALUES:
        raise ValueError(f"n_values must lie in [2, {MAX_N_VALUES}] to fit a byte, got {n_values}")


def weights_per_byte(n_values: int) -> int:
    """Largest k with n_values ** k <= 256."""
    _check_n_values(n_values)
    k = 1
    while n_values ** (k + 1) <= MAX_N_VALUES:
        k += 1
    return k


def memory_reduction(n_values: int) -> int:
    """Storage factor against 32-bit floats: four bytes replaced by 1/k byte."""
    return 4 * weights_per_byte(n_values)


def packed_size(count: int, n_values: int) -> int:
    return math.ceil(count / weights_per_byte(n_values))


def pack_layer(w_q: np.ndarray, n_values: int) -> bytes:
    k = weights_per_byte(n_values)
    digits = GridIndexMap(n_values).to_digits(w_q)
    if digits.size == 0:
        return b""
    padded = np.zeros(packed_size(digits.size, n_values) * k, dtype=np.int64)
    padded[:digits.size] = digits
    place = n_values ** np.arange(k, dtype=np.int64)
    return (padded.reshape(-1, k) @ place).astype(np.uint8).tobytes()


def unpack_layer(payload: bytes, n_values: int, count: int) -> np.ndarray:
    """Inverse of ``pack_layer``: the first ``count`` grid values as a flat float32 array."""
    k = weights_per_byte(n_values)
    expected = packed_size(count, n_values)
    if len(payload) != expected:
        raise CorruptPayload(f"Payload holds {len(payload)} bytes, {count} weights need {expected}")
    if count == 0:
        return np.zeros(0, dtype=np.float32)
    encoded = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    digits = np.empty((encoded.size, k), dtype=np.int64)
    rest = encoded
    for i in range(k - 1):
        digits[:, i] = rest % n_values
        rest = rest // n_values
    digits[:, k - 1] = rest
    bad = np.flatnonzero(digits[:, k - 1] >= n_values)
    if bad.size:
        raise CorruptPayload(f"Byte {int(bad[0])} (value {int(encoded[bad[0]])}) decodes to a digit >= {n_values}")
    return GridIndexMap(n_values).to_values(digits.reshape(-1)[:count])


# --- LBQ1 container ---------------------------------------------------------

@dataclass
class LayerRecord:
    name: str
    packed: bool
    dims: Tuple[int, ...]
    gamma: float = 0.0
    bias: Optional[np.ndarray] = None
    payload: bytes = b""

    @property
    def count(self) -> int:
        return int(np.prod(self.dims)) if self.dims else 1

    def to_bytes(self) -> bytes:
        name = self.name.encode("utf-8")
        parts = [struct.pack("<H", len(name)), name,
                 struct.pack("<B", len(self.dims)),
                 struct.pack(f"<{len(self.dims)}I", *self.dims),
                 struct.pack("<f", self.gamma),
                 struct.pack("<B", self.bias is not None)]
        if self.bias is not None:
            parts.append(np.asarray(self.bias, dtype="<f4").tobytes())
        parts += [struct.pack("<I", len(self.payload)), self.payload]
        return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"File ends inside {what} at byte {self.pos} ({len(self.raw)} bytes total)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def record(self) -> LayerRecord:
        (name_len,) = self.unpack("<H", "layer name length")
        name = self.take(name_len, "layer name").decode("utf-8", errors="replace")
        (rank,) = self.unpack("<B", f"{name} rank")
        dims = self.unpack(f"<{rank}I", f"{name} dims")
        (gamma,) = self.unpack("<f", f"{name} gamma")
        (has_bias,) = self.unpack("<B", f"{name} bias flag")
        bias = None
        if has_bias:
            if not dims:
                raise CorruptPayload(f"{name}: a bias needs at least one dimension")
            bias = np.frombuffer(self.take(4 * dims[0], f"{name} bias"), dtype="<f4").astype(np.float32)
        (payload_len,) = self.unpack("<I", f"{name} payload length")
        payload = self.take(payload_len, f"{name} payload")
        count = int(np.prod(dims)) if dims else 1
        # raw float32 weights fill exactly 4 bytes each, packed digits at most 1
        return LayerRecord(name, payload_len != 4 * count, tuple(dims), gamma, bias, payload)


@dataclass
class PackedModelFile:
    kind: ModelKind
    n_values: Optional[int]
    records: List[LayerRecord] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @property
    def conv_filter_size(self) -> int:
        for record in self.records:
            if len(record.dims) == 4:
                return record.dims[2]
        return 3

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack("<HBHI", self.version, self.kind.tag, self.n_values or 0, len(self.records))
        return header + b"".join(record.to_bytes() for record in self.records)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PackedModelFile":
        reader = _Reader(raw)
        magic = reader.take(len(MAGIC), "magic")
        if magic != MAGIC:
            raise BadMagic(f"Not an LBQ1 file (magic {magic!r})")
        version, tag, n_values, layer_count = reader.unpack("<HBHI", "header")
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"Format version {version} is not supported (expected {FORMAT_VERSION})")
        try:
            kind = ModelKind.from_tag(tag)
        except ValueError as e:
            raise CorruptPayload(str(e)) from e
        if n_values and not 2 <= n_values <= MAX_N_VALUES:
            raise CorruptPayload(f"Header n_values {n_values} is neither 0 nor in [2, {MAX_N_VALUES}]")
        records = [reader.record() for _ in range(layer_count)]
        if reader.pos != len(raw):
            raise CorruptPayload(f"{len(raw) - reader.pos} unexpected trailing bytes")
        if not n_values and any(r.packed for r in records):
            raise CorruptPayload("Packed weight records in a file whose header declares a full-precision model")
        return cls(kind, n_values or None, records, version)

    def weight_bytes(self) -> Tuple[int, int]:
        """(bytes as 32-bit floats, bytes as stored) over the packed weight payloads."""
        packed = [r for r in self.records if r.packed]
        return 4 * sum(r.count for r in packed), sum(len(r.payload) for r in packed)


def save_model(model: Model) -> PackedModelFile:
    records = []
    for layer in model.weight_layers():
        bias = layer.bias.data.copy() if layer.bias is not None else None
        if layer.quantized:
            result = layer.quantize()
            records.append(LayerRecord(layer.name, True, layer.weight.shape, float(result.gamma),
                                       bias, pack_layer(result.w_q.data, layer.n_values)))
        else:
            records.append(LayerRecord(layer.name, False, layer.weight.shape, 0.0,
                                       bias, layer.weight.data.astype("<f4").tobytes()))
    n_values = model.config.layer_n_values
    return PackedModelFile(model.kind, n_values, records)


def _load_record(layer, record: LayerRecord) -> None:
    if record.packed:
        w_q = unpack_layer(record.payload, layer.n_values, record.count).reshape(record.dims)
        layer.freeze(w_q, record.gamma)
        layer.load_bias(record.bias)
        return
    if len(record.payload) != 4 * record.count:
        raise CorruptPayload(f"{record.name}: raw payload holds {len(record.payload)} bytes, "
                             f"expected {4 * record.count}")
    weight = np.frombuffer(record.payload, dtype="<f4").reshape(record.dims).astype(np.float32)
    layer.load_weights(weight, record.bias)


def load_model(packed: PackedModelFile) -> Model:
    """Rebuild the architecture and fill it from the records; the result serves inference only."""
    try:
        config = ModelConfig(kind=packed.kind, n_values=packed.n_values or FULL_PRECISION,
                             conv_filter_size=packed.conv_filter_size)
    except ValidationError as e:
        raise CorruptPayload(f"Header describes no buildable model: {e.error_count()} invalid field(s)") from e
    model = build_model(config)
    layers = model.layer_by_name()
    if len(packed.records) != len(layers):
        raise CorruptPayload(f"{packed.kind.value} has {len(layers)} weight layers, file has {len(packed.records)}")
    for record in packed.records:
        layer = layers.get(record.name)
        if layer is None:
            raise CorruptPayload(f"No layer named {record.name!r} in {packed.kind.value}")
        if tuple(record.dims) != layer.weight.shape:
            raise CorruptPayload(f"{record.name}: dims {record.dims} != {layer.weight.shape}")
        if record.packed != layer.quantized:
            raise CorruptPayload(f"{record.name}: encoding does not match the layer's quantization")
        try:
            _load_record(layer, record)
        except ShapeError as e:
            raise CorruptPayload(str(e)) from e
    for p in model.parameters():
        p.requires_grad = False
    model.inference_only = True
    return model


def write_packed(packed: PackedModelFile, path) -> Path:
    path = Path(path)
    raw = packed.to_bytes()
    path.write_bytes(raw)
    full, stored = packed.weight_bytes()
    ratio = f", weights {full:,} -> {stored:,} bytes" if stored else ""
    logger.info(f"Wrote {path} ({len(raw):,} bytes{ratio})")
    return path


def read_packed(path) -> PackedModelFile:
    return PackedModelFile.from_bytes(Path(path).read_bytes())


def describe(packed: PackedModelFile) -> str:
    """Human-readable inventory: per layer encoding, counts, stored bytes and reduction."""
    n_label = packed.n_values if packed.n_values else FULL_PRECISION
    lines = [f"model: {packed.kind.value}", f"n_values: {n_label}", f"format version: {packed.version}",
             f"layers: {len(packed.records)}"]
    if packed.n_values:
        lines.append(f"bits per weight: {math.log2(packed.n_values):.2f}, "
                     f"weights per byte: {weights_per_byte(packed.n_values)}")
    lines.append("")
    lines.append(f"{'layer':<36} {'encoding':<8} {'shape':<20} {'params':>10} {'bytes':>10} {'reduction':>9}")
    total_params = 0
    for r in packed.records:
        bias_count = 0 if r.bias is None else r.bias.size
        total_params += r.count + bias_count
        reduction = f"{4 * r.count / len(r.payload):.2f}x" if r.payload else "-"
        shape = "x".join(str(d) for d in r.dims)
        lines.append(f"{r.name:<36} {'packed' if r.packed else 'raw':<8} {shape:<20} "
                     f"{r.count + bias_count:>10,} {len(r.payload):>10,} {reduction:>9}")
    lines.append("")
    lines.append(f"total parameters: {total_params:,}")
    report = load_model(packed).quantization_report()
    if report:
        grid = " ".join(f"{v:+.3g}" for v in grid_values(packed.n_values).values)
        lines.append(f"grid usage per layer (values {grid}):")
        lines += [f"  {entry['name']} (gamma {entry['gamma']:.6g}): " + " ".join(str(c) for c in entry["usage"])
                  for entry in report]
    full, stored = packed.weight_bytes()
    if packed.n_values and stored:
        lines.append(f"memory reduction (weights only): {memory_reduction(packed.n_values)}x "
                     f"({full:,} -> {stored:,} bytes, measured {full / stored:.2f}x)")
    file_size = len(packed.to_bytes())
    lines.append(f"file size: {file_size:,} bytes, 32-bit equivalent {4 * total_params:,} bytes "
                 f"({4 * total_params / file_size:.2f}x)")
    return "\n".join(lines)
