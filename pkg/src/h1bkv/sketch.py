"""One-bit random-projection sketches and bitwise Hamming scoring.

A key (or query) vector ``v`` of dimension ``d`` is projected by a fixed
Gaussian matrix ``R`` of shape ``(b, d)`` and only the signs of ``R v`` are
kept. Two sketches are compared with the normalized Hamming inner product
``(b - 2 * popcount(a xor c)) / b``, which in expectation equals
``1 - (2 / pi) * arccos(cos_angle)`` for the original vectors.

Bit layout: bit ``i`` lives in word ``i // 64`` at position ``i % 64``
(least significant bit first). Bit value 1 encodes sign +1 and 0 encodes -1.
Positions ``>= b`` in the last word are always 0. ``sign(0)`` is +1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import rng

WORD_BITS = 64


def n_words(b: int) -> int:
    return (b + WORD_BITS - 1) // WORD_BITS


def pad_mask(b: int) -> np.ndarray:
    """Per-word masks with ones exactly at the valid bit positions."""
    masks = np.full(n_words(b), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = b % WORD_BITS
    if tail:
        masks[-1] = np.uint64((1 << tail) - 1)
    return masks


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SketchMatrix:
    """The fixed Gaussian projection, shape ``(b, d)``."""

    seed: int
    entries: np.ndarray

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    b = rows
    d = cols

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SketchMatrix):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash((self.seed, self.entries.shape))


@dataclass(frozen=True, eq=False)
class PackedSketch:
    """A ``width``-bit sign sketch stored as little-endian 64-bit words."""

    words: np.ndarray
    width: int

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError("sketch width must be >= 1")
        if self.words.dtype != np.uint64 or self.words.shape != (n_words(self.width),):
            raise ValueError(
                f"expected {n_words(self.width)} uint64 words for width {self.width}"
            )
        if np.any(self.words & ~pad_mask(self.width)):
            raise ValueError("padding bits beyond the sketch width must be zero")

    @property
    def padmask(self) -> np.ndarray:
        return pad_mask(self.width)

    @property
    def nbytes(self) -> int:
        """Storage cost in bytes, ``ceil(width / 8)``."""
        return (self.width + 7) // 8

    def unpack(self) -> np.ndarray:
        """Bits as a boolean array of length ``width`` (True means +1)."""
        return unpack_words(self.words, self.width)

    def signs(self) -> np.ndarray:
        return np.where(self.unpack(), 1, -1).astype(np.int8)

    def complement(self) -> PackedSketch:
        return PackedSketch(_readonly(~self.words & self.padmask), self.width)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PackedSketch):
            return NotImplemented
        return self.width == other.width and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.width, self.words.tobytes()))

    def to_bytes(self) -> bytes:
        """Width as u32 LE followed by the words as u64 LE."""
        return struct.pack("<I", self.width) + self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[PackedSketch, int]:
        """Parse one sketch at ``offset``; returns it and the next offset."""
        (width,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        count = n_words(width)
        end = offset + 8 * count
        if end > len(buf):
            raise ValueError("truncated sketch record")
        words = np.frombuffer(buf[offset:end], dtype="<u8").astype(np.uint64)
        return cls(_readonly(words), width), end


def pack_bits(bits: Sequence[bool] | np.ndarray) -> PackedSketch:
    """Pack a boolean vector (True = +1) into a :class:`PackedSketch`."""
    bits = np.asarray(bits, dtype=bool)
    if bits.ndim != 1:
        raise ValueError("expected a 1-D bit vector")
    return PackedSketch(_readonly(pack_rows(bits[None, :])[0]), bits.size)


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean matrix ``(n, b)`` into uint64 words ``(n, ceil(b/64))``."""
    n, b = bits.shape
    padded = np.zeros((n, n_words(b) * WORD_BITS), dtype=bool)
    padded[:, :b] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_words(words: np.ndarray, b: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, bitorder="little")[:b].astype(bool)


def build_matrix(seed: int, b: int, d: int) -> SketchMatrix:
    """Deterministic ``(b, d)`` standard-normal matrix from the pinned generator.

    Entries are filled row-major from :func:`h1bkv.rng.standard_normal`.
    """
    if b < 1 or d < 1:
        raise ValueError(f"sketch matrix needs b >= 1 and d >= 1, got b={b}, d={d}")
    seed = rng.check_seed(seed)
    entries = rng.standard_normal(seed, b * d).reshape(b, d)
    return SketchMatrix(seed, _readonly(entries))


def head_seed(master_seed: int, layer: int, head: int) -> int:
    """Seed of the projection for one attention head.

    Equal to ``rng.derive_seed(master_seed, layer, head)``.
    """
    return rng.derive_seed(master_seed, layer, head)


def head_matrix(master_seed: int, layer: int, head: int, b: int, d: int) -> SketchMatrix:
    return build_matrix(head_seed(master_seed, layer, head), b, d)


def _check_vector(m: SketchMatrix, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != m.cols:
        raise ValueError(f"vector dimension {v.shape[-1]} does not match matrix d={m.cols}")
    if not np.all(np.isfinite(v)):
        raise ValueError("sketch input must be finite")
    return v


def sketch(m: SketchMatrix, v: np.ndarray) -> PackedSketch:
    v = _check_vector(m, v)
    if v.ndim != 1:
        raise ValueError("sketch() takes a single vector; use sketch_rows for batches")
    return PackedSketch(_readonly(sketch_rows(m, v[None, :])[0]), m.rows)


def sketch_rows(m: SketchMatrix, vectors: np.ndarray) -> np.ndarray:
    """Sketch each row of ``vectors`` ``(n, d)``; returns words ``(n, ceil(b/64))``."""
    vectors = _check_vector(m, vectors)
    projections = vectors @ m.entries.T
    return pack_rows(projections >= 0.0)


def hamming_score(a: PackedSketch, c: PackedSketch) -> float:
    """Normalized Hamming inner product of two sketches, in [-1, 1]."""
    if a.width != c.width:
        raise ValueError(f"sketch widths differ: {a.width} vs {c.width}")
    diff = np.bitwise_count((a.words ^ c.words) & a.padmask).sum()
    return (a.width - 2 * int(diff)) / a.width


def hamming_scores(keys: np.ndarray, query: np.ndarray, b: int) -> np.ndarray:
    """Score one query's words against a matrix of key words ``(n, W)``.

    Equivalent to ``[hamming_score(k, q) for k in keys]`` but vectorized.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    query = np.asarray(query, dtype=np.uint64)
    if keys.ndim != 2 or keys.shape[1] != n_words(b) or query.shape != (n_words(b),):
        raise ValueError("word shapes do not match sketch width")
    mismatches = np.bitwise_count((keys ^ query) & pad_mask(b)).sum(axis=1, dtype=np.int64)
    return (b - 2 * mismatches) / b


def expected_score(cosine: float | np.ndarray) -> float | np.ndarray:
    """``1 - (2 / pi) * arccos(cosine)``, the mean normalized Hamming inner product."""
    return 1.0 - (2.0 / np.pi) * np.arccos(cosine)


@dataclass(frozen=True)
class CurvePoint:
    cosine: float
    empirical: float
    theoretical: float

    @property
    def abs_error(self) -> float:
        return abs(self.empirical - self.theoretical)


def estimate_similarity_curve(
    b: int,
    cosines: Iterable[float],
    trials: int,
    seed: int = 0,
    d: int = 8,
) -> list[CurvePoint]:
    """Monte-Carlo check of the sign-sketch similarity law.

    For each target cosine a pair of unit vectors with exactly that inner
    product is built in R^d, then ``trials`` independent projection
    matrices are drawn and the sketch scores averaged. The law does not
    depend on ``d`` (the Gaussian is rotation invariant), so a small ``d``
    keeps the run cheap.
    """
    if b < 1:
        raise ValueError("b must be >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if d < 2:
        raise ValueError("d must be >= 2 to place two distinct unit vectors")
    seed = rng.check_seed(seed)
    cosines = [float(c) for c in cosines]
    points = []
    for i, rho in enumerate(cosines):
        if not -1.0 < rho < 1.0:
            raise ValueError(f"cosine must lie strictly inside (-1, 1), got {rho}")
        base = rng.derive_seed(seed, i)
        q, k = _pair_with_cosine(rng.derive_seed(base, 0), d, rho)
        total = 0.0
        # chunked so memory stays bounded for large trial counts
        chunk = max(1, 1_000_000 // (b * d))
        for start in range(0, trials, chunk):
            n = min(chunk, trials - start)
            mats = _trial_matrices(rng.derive_seed(base, 1, start), n, b, d)
            q_words = pack_rows(mats @ q >= 0.0)
            k_words = pack_rows(mats @ k >= 0.0)
            mism = np.bitwise_count((q_words ^ k_words) & pad_mask(b)).sum(axis=1, dtype=np.int64)
            total += float(((b - 2 * mism) / b).sum())
        points.append(CurvePoint(rho, total / trials, float(expected_score(rho))))
    return points


def _pair_with_cosine(seed: int, d: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    q, r = rng.unit_vectors(seed, 2, d)
    ortho = r - (r @ q) * q
    ortho /= np.linalg.norm(ortho)
    k = rho * q + np.sqrt(1.0 - rho * rho) * ortho
    return q, k


def _trial_matrices(seed: int, n: int, b: int, d: int) -> np.ndarray:
    return rng.standard_normal(seed, n * b * d).reshape(n, b, d)
