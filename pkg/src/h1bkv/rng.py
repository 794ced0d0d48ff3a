"""Pinned, platform-independent random number generation.

Every random quantity in the package (projection matrices, model weights,
synthetic contexts) is drawn from this module rather than from
``numpy.random`` so that a seed maps to the same numbers on every platform
and numpy version.

Algorithm
---------
A counter-based generator keyed by a 64-bit seed. For stream key ``k`` and
counter ``i`` the i-th raw 64-bit word is::

    key  = mix64(seed ^ 0x6A09E667F3BCC909)
    x_i  = mix64(mix64(i * 0x9E3779B97F4A7C15 ^ key) + key)

where ``mix64`` is the SplitMix64 finalizer (xor-shift 30/27/31 with the
multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). All arithmetic is
modulo 2**64.

Uniforms in (0, 1] take the top 53 bits: ``u_i = ((x_i >> 11) + 1) * 2**-53``.

Standard normals use Box-Muller on consecutive uniform pairs. Normal ``2j``
is ``sqrt(-2 ln u_{2j}) * cos(2 pi u_{2j+1})`` and normal ``2j+1`` the
matching ``sin`` term.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_KEY_SALT = 0x6A09E667F3BCC909
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python integer."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed


def derive_seed(master_seed: int, *indices: int) -> int:
    """Derive a child seed from ``master_seed`` and a tuple of indices.

    ``derive_seed(s, i, j) = mix64(mix64(mix64(s) ^ (i + 1)) ^ (j + 1))``,
    folding one index per round. Used for per-(layer, head) projection
    matrices and per-tensor weight streams.
    """
    h = mix64(check_seed(master_seed))
    for idx in indices:
        if idx < 0:
            raise ValueError("seed indices must be non-negative")
        h = mix64(h ^ ((idx + 1) * GOLDEN & MASK64))
    return h


def random_words(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Raw 64-bit words ``x_offset .. x_{offset+n-1}`` of the stream."""
    key = np.uint64(mix64(check_seed(seed) ^ _KEY_SALT))
    counters = np.arange(offset, offset + n, dtype=np.uint64)
    x = _mix64(counters * np.uint64(GOLDEN) ^ key)
    return _mix64(x + key)


def uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` doubles in (0, 1]."""
    words = random_words(seed, n, offset)
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def standard_normal(seed: int, n: int) -> np.ndarray:
    """``n`` standard normal variates via Box-Muller."""
    pairs = (n + 1) // 2
    u = uniform(seed, 2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log(u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    out = np.empty((pairs, 2))
    out[:, 0] = radius * np.cos(angle)
    out[:, 1] = radius * np.sin(angle)
    return out.reshape(-1)[:n]


def unit_vectors(seed: int, n: int, d: int) -> np.ndarray:
    """``n`` random unit vectors in R^d, shape (n, d)."""
    x = standard_normal(seed, n * d).reshape(n, d)
    return x / np.linalg.norm(x, axis=1, keepdims=True)
