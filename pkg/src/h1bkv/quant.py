"""Per-vector 4-bit affine quantization of value vectors.

For a vector ``v``::

    lo, hi     = min(v, 0), max(v, 0)
    scale      = (hi - lo) / 15
    zero_point = clamp(round(-lo / scale), 0, 15)
    code_i     = clamp(round(v_i / scale) + zero_point, 0, 15)
    v_hat_i    = (code_i - zero_point) * scale

``round`` is round-half-away-from-zero. The range is widened to contain 0
so the zero-point always lands inside [0, 15]; when ``v`` already straddles
0 this is the plain min/max scheme. Codes are evaluated as
``round((v_i - lo) / scale - shift) + zero_point`` with ``shift = -lo / scale``,
the same map rearranged so the range ends always take codes 0 and 15.

A constant vector (``max(v) == min(v)``) sets the degenerate flag, stores the
constant in the scale slot, and dequantizes exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

LEVELS = 15
FLAG_DEGENERATE = 0x01
# f32 scale + u8 zero-point/flags
PARAM_BYTES = 5


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two 4-bit codes per byte, low nibble first; odd tail gets a 0 high nibble."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, length: int) -> np.ndarray:
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:length]


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    packed: np.ndarray
    scale: float
    zero_point: int
    length: int
    degenerate: bool = False

    @property
    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.packed, self.length)

    @property
    def flags(self) -> int:
        return FLAG_DEGENERATE if self.degenerate else 0

    @property
    def nbytes(self) -> int:
        """Storage cost: packed codes plus scale (f32) and zero-point/flags (u8)."""
        return (self.length + 1) // 2 + PARAM_BYTES

    @property
    def step(self) -> float:
        """Lattice spacing; 0 for degenerate vectors."""
        return 0.0 if self.degenerate else self.scale

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return (
            self.length == other.length
            and self.degenerate == other.degenerate
            and self.zero_point == other.zero_point
            and self.scale == other.scale
            and np.array_equal(self.packed, other.packed)
        )

    def to_bytes(self) -> bytes:
        """length u32, flags u8, zero_point u8, scale f32, then the code bytes.

        The scale is narrowed to f32 here; in memory it is kept as a double.
        """
        head = struct.pack("<IBBf", self.length, self.flags, self.zero_point, self.scale)
        return head + self.packed.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[QuantizedVector, int]:
        length, flags, zero_point, scale = struct.unpack_from("<IBBf", buf, offset)
        offset += struct.calcsize("<IBBf")
        end = offset + (length + 1) // 2
        if end > len(buf):
            raise ValueError("truncated quantized-vector record")
        packed = np.frombuffer(buf[offset:end], dtype=np.uint8).copy()
        packed.setflags(write=False)
        q = cls(packed, float(scale), zero_point, length, bool(flags & FLAG_DEGENERATE))
        return q, end


def quantize(v: np.ndarray) -> QuantizedVector:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("quantize expects a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize NaN or infinite values")
    vmin, vmax = float(v.min()), float(v.max())
    if vmin == vmax:
        packed = pack_nibbles(np.zeros(v.size, dtype=np.uint8))
        packed.setflags(write=False)
        return QuantizedVector(packed, vmin, 0, v.size, degenerate=True)
    lo, hi = min(vmin, 0.0), max(vmax, 0.0)
    scale = (hi - lo) / LEVELS
    floored = scale < np.finfo(np.float64).smallest_subnormal
    if floored:
        # ranges below ~15 subnormals would underflow the step to 0
        scale = float(np.finfo(np.float64).smallest_subnormal)
    shift = -lo / scale
    zero_point = int(np.clip(round_half_away(shift), 0, LEVELS))
    # round(v/scale) + z, with v/scale written as (v - lo)/scale - shift so the
    # range ends land on codes 0 and 15 even when shift sits on a rounding tie
    offsets = (v - lo) / scale
    if not floored:
        offsets[v == hi] = LEVELS
    codes = np.clip(round_half_away(offsets - shift) + zero_point, 0, LEVELS).astype(np.uint8)
    packed = pack_nibbles(codes)
    packed.setflags(write=False)
    return QuantizedVector(packed, scale, zero_point, v.size)


def dequantize(q: QuantizedVector) -> np.ndarray:
    if q.degenerate:
        return np.full(q.length, q.scale)
    return (q.codes.astype(np.float64) - q.zero_point) * q.scale


def roundtrip_error(v: np.ndarray) -> tuple[float, float]:
    """Max absolute round-trip error of ``v`` and the lattice step it used."""
    q = quantize(v)
    return float(np.max(np.abs(dequantize(q) - np.asarray(v, dtype=np.float64)))), q.step
