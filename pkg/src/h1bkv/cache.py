"""Append-only hybrid KV cache with exact byte accounting."""

from __future__ import annotations

import enum
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from typing import BinaryIO

import numpy as np

from . import quant
from .sketch import PackedSketch, SketchMatrix, head_matrix, sketch_rows

DUMP_MAGIC = b"H1BC"
DUMP_VERSION = 1


class KeyMode(str, enum.Enum):
    EXACT = "exact"
    SKETCH = "sketch"


class ValueMode(str, enum.Enum):
    REFERENCE = "reference"
    INT4 = "int4"


# named (key_mode, value_mode) pairs used by the harness and CLI
PRESETS = {
    "reference": (KeyMode.EXACT, ValueMode.REFERENCE),
    "key-only": (KeyMode.SKETCH, ValueMode.REFERENCE),
    "h1bkv": (KeyMode.SKETCH, ValueMode.INT4),
    "int4-values": (KeyMode.EXACT, ValueMode.INT4),
}


@dataclass(frozen=True)
class CacheConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    sketch_bits: int = 256
    key_mode: KeyMode = KeyMode.SKETCH
    value_mode: ValueMode = ValueMode.INT4
    master_seed: int = 0
    fp_width: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "key_mode", KeyMode(self.key_mode))
        object.__setattr__(self, "value_mode", ValueMode(self.value_mode))
        if min(self.n_layers, self.n_heads, self.head_dim) < 1:
            raise ValueError("n_layers, n_heads and head_dim must all be >= 1")
        if self.key_mode is KeyMode.SKETCH and self.sketch_bits < 1:
            raise ValueError("sketch key mode requires sketch_bits >= 1")
        if self.fp_width < 1:
            raise ValueError("fp_width must be >= 1")

    @classmethod
    def preset(cls, name: str, n_layers: int, n_heads: int, head_dim: int, **kw) -> CacheConfig:
        try:
            key_mode, value_mode = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown cache preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(n_layers, n_heads, head_dim, key_mode=key_mode, value_mode=value_mode, **kw)

    @property
    def key_bytes(self) -> int:
        if self.key_mode is KeyMode.SKETCH:
            return (self.sketch_bits + 7) // 8
        return self.head_dim * self.fp_width

    @property
    def value_bytes(self) -> int:
        if self.value_mode is ValueMode.INT4:
            return (self.head_dim + 1) // 2 + quant.PARAM_BYTES
        return self.head_dim * self.fp_width

    @property
    def token_bytes(self) -> int:
        """Bytes added by one token across all layers and heads."""
        return self.n_layers * self.n_heads * (self.key_bytes + self.value_bytes)

    def size_for(self, tokens: int) -> int:
        return tokens * self.token_bytes

    def same_shape(self, other: CacheConfig) -> bool:
        return (self.n_layers, self.n_heads, self.head_dim) == (
            other.n_layers,
            other.n_heads,
            other.head_dim,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["key_mode"] = self.key_mode.value
        d["value_mode"] = self.value_mode.value
        return d


class _Slot:
    """Storage for one (layer, head): entries plus stacked views for scoring."""

    def __init__(self) -> None:
        self.keys: list = []
        self.values: list = []
        self._key_rows: list[np.ndarray] = []
        self._value_rows: list[np.ndarray] = []
        self._key_mat: np.ndarray | None = None
        self._value_mat: np.ndarray | None = None

    def push(self, key, key_row: np.ndarray, value, value_row: np.ndarray) -> None:
        self.keys.append(key)
        self.values.append(value)
        self._key_rows.append(key_row)
        self._value_rows.append(value_row)
        self._key_mat = self._value_mat = None

    def key_matrix(self) -> np.ndarray:
        if self._key_mat is None:
            self._key_mat = np.stack(self._key_rows)
            self._key_mat.setflags(write=False)
        return self._key_mat

    def value_matrix(self) -> np.ndarray:
        if self._value_mat is None:
            self._value_mat = np.stack(self._value_rows)
            self._value_mat.setflags(write=False)
        return self._value_mat


class H1BCache:
    """Per-layer, per-head append-only store of compressed keys and values.

    Append must not run concurrently with reads or other appends; reads
    between appends are safe from any number of threads.
    """

    def __init__(self, config: CacheConfig):
        self.config = config
        self._slots = [[_Slot() for _ in range(config.n_heads)] for _ in range(config.n_layers)]
        self._matrices: dict[tuple[int, int], SketchMatrix] = {}

    def __repr__(self) -> str:
        c = self.config
        return (
            f"H1BCache({c.key_mode.value}/{c.value_mode.value}, layers={c.n_layers}, "
            f"heads={c.n_heads}, d={c.head_dim}, b={c.sketch_bits}, tokens={self.token_count})"
        )

    def _slot(self, layer: int, head: int) -> _Slot:
        if not (0 <= layer < self.config.n_layers and 0 <= head < self.config.n_heads):
            raise IndexError(
                f"slot ({layer}, {head}) out of range for "
                f"{self.config.n_layers} layers x {self.config.n_heads} heads"
            )
        return self._slots[layer][head]

    def matrix(self, layer: int, head: int) -> SketchMatrix:
        """The fixed projection used to sketch keys and queries of one head."""
        self._slot(layer, head)
        key = (layer, head)
        if key not in self._matrices:
            c = self.config
            self._matrices[key] = head_matrix(c.master_seed, layer, head, c.sketch_bits, c.head_dim)
        return self._matrices[key]

    def _vector(self, x, name: str) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.config.head_dim,):
            raise ValueError(f"{name} must have shape ({self.config.head_dim},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{name} contains NaN or Inf")
        return x

    def append(self, layer: int, head: int, k, v) -> None:
        slot = self._slot(layer, head)
        k = self._vector(k, "key")
        v = self._vector(v, "value")
        if self.config.key_mode is KeyMode.SKETCH:
            words = sketch_rows(self.matrix(layer, head), k[None, :])[0]
            words.setflags(write=False)
            key_entry, key_row = PackedSketch(words, self.config.sketch_bits), words
        else:
            key_entry = key_row = k.copy()
            key_row.setflags(write=False)
        if self.config.value_mode is ValueMode.INT4:
            value_entry = quant.quantize(v)
            value_row = quant.dequantize(value_entry)
        else:
            value_entry = value_row = v.copy()
            value_row.setflags(write=False)
        slot.push(key_entry, key_row, value_entry, value_row)

    def append_heads(self, layer: int, keys, values) -> None:
        """Append one token's ``(n_heads, d)`` keys and values for a layer."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        for h in range(self.config.n_heads):
            self.append(layer, h, keys[h], values[h])

    def length(self, layer: int, head: int) -> int:
        return len(self._slot(layer, head).keys)

    @property
    def token_count(self) -> int:
        """Tokens appended to every slot (a partially swept token is not counted)."""
        return min(len(s.keys) for row in self._slots for s in row)

    def key_entries(self, layer: int, head: int) -> list:
        return list(self._slot(layer, head).keys)

    def value_entries(self, layer: int, head: int) -> list:
        return list(self._slot(layer, head).values)

    def key_matrix(self, layer: int, head: int) -> np.ndarray:
        """Stacked keys: sketch words ``(T, ceil(b/64))`` or exact vectors ``(T, d)``."""
        return self._slot(layer, head).key_matrix()

    def value_matrix(self, layer: int, head: int) -> np.ndarray:
        """Stacked values as seen by attention (dequantized in int4 mode)."""
        return self._slot(layer, head).value_matrix()

    def byte_size(self) -> int:
        return self.config.size_for(self.token_count)

    def dump(self, fh: BinaryIO) -> None:
        """Write the debug dump: magic, version, JSON config, then all entries.

        Exact keys/values are written as f32 arrays; sketches and quantized
        vectors use their own record formats. Order is (layer, head, token).
        """
        cfg = json.dumps(self.config.to_json(), sort_keys=True).encode()
        fh.write(DUMP_MAGIC + struct.pack("<II", DUMP_VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", self.token_count))
        for layer in range(self.config.n_layers):
            for head in range(self.config.n_heads):
                slot = self._slots[layer][head]
                for t in range(self.token_count):
                    fh.write(_entry_bytes(slot.keys[t]))
                    fh.write(_entry_bytes(slot.values[t]))

    def dumps(self) -> bytes:
        buf = io.BytesIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, data: bytes) -> H1BCache:
        """Rebuild a cache from :meth:`dumps` output.

        Quantized scales come back narrowed to f32.
        """
        if data[:4] != DUMP_MAGIC:
            raise ValueError("not an H1BC cache dump")
        version, cfg_len = struct.unpack_from("<II", data, 4)
        if version != DUMP_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        off = 12
        config = CacheConfig(**json.loads(data[off : off + cfg_len]))
        off += cfg_len
        (tokens,) = struct.unpack_from("<I", data, off)
        off += 4
        cache = cls(config)
        for layer in range(config.n_layers):
            for head in range(config.n_heads):
                slot = cache._slots[layer][head]
                for _ in range(tokens):
                    if config.key_mode is KeyMode.SKETCH:
                        key, off = PackedSketch.from_bytes(data, off)
                        key_row = key.words
                    else:
                        key, off = _read_f32(data, off, config.head_dim)
                        key_row = key
                    if config.value_mode is ValueMode.INT4:
                        value, off = quant.QuantizedVector.from_bytes(data, off)
                        value_row = quant.dequantize(value)
                    else:
                        value, off = _read_f32(data, off, config.head_dim)
                        value_row = value
                    slot.push(key, key_row, value, value_row)
        return cache


def _entry_bytes(entry) -> bytes:
    if isinstance(entry, (PackedSketch, quant.QuantizedVector)):
        return entry.to_bytes()
    return np.asarray(entry, dtype="<f4").tobytes()


def _read_f32(data: bytes, off: int, d: int) -> tuple[np.ndarray, int]:
    end = off + 4 * d
    arr = np.frombuffer(data[off:end], dtype="<f4").astype(np.float64)
    arr.setflags(write=False)
    return arr, end


def closed_form_size(config: CacheConfig, tokens: int) -> int:
    """``tokens * n_layers * n_heads * (key_bytes + value_bytes)``."""
    if tokens < 0:
        raise ValueError("token count must be non-negative")
    return config.size_for(tokens)


def compression_report(config_a: CacheConfig, config_b: CacheConfig, tokens: int) -> dict:
    """Size of ``config_a`` relative to ``config_b`` with a key/value breakdown.

    ``ratio`` is ``size_a / size_b``, so a reference cache as ``config_a``
    and a compressed one as ``config_b`` gives the compression factor.
    """
    if not config_a.same_shape(config_b):
        raise ValueError("configs must share n_layers, n_heads and head_dim")
    if tokens < 0:
        raise ValueError("token count must be non-negative")
    slots = tokens * config_a.n_layers * config_a.n_heads

    def part(c: CacheConfig) -> dict:
        return {
            "key_mode": c.key_mode.value,
            "value_mode": c.value_mode.value,
            "sketch_bits": c.sketch_bits,
            "key_bytes_per_token_head": c.key_bytes,
            "value_bytes_per_token_head": c.value_bytes,
            "key_bytes": slots * c.key_bytes,
            "value_bytes": slots * c.value_bytes,
            "total_bytes": slots * (c.key_bytes + c.value_bytes),
            "total_mb": slots * (c.key_bytes + c.value_bytes) / 1e6,
        }

    a, b = part(config_a), part(config_b)

    def ratio(x: int, y: int) -> float:
        if y == 0:
            return 1.0 if x == 0 else math.inf
        return x / y

    return {
        "tokens": tokens,
        "shape": {
            "n_layers": config_a.n_layers,
            "n_heads": config_a.n_heads,
            "head_dim": config_a.head_dim,
        },
        "a": a,
        "b": b,
        "ratio": ratio(a["total_bytes"], b["total_bytes"]),
        "key_ratio": ratio(a["key_bytes"], b["key_bytes"]),
        "value_ratio": ratio(a["value_bytes"], b["value_bytes"]),
        "reduction": 1.0 - (b["total_bytes"] / a["total_bytes"]) if a["total_bytes"] else 0.0,
    }


def with_modes(config: CacheConfig, preset: str, **kw) -> CacheConfig:
    key_mode, value_mode = PRESETS[preset]
    return replace(config, key_mode=key_mode, value_mode=value_mode, **kw)


__all__ = [
    "CacheConfig",
    "H1BCache",
    "KeyMode",
    "ValueMode",
    "PRESETS",
    "closed_form_size",
    "compression_report",
    "with_modes",
]
