"""Microbenchmark of attention scoring: FP16 dot products vs bitwise sketches."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import rng
from .sketch import build_matrix, hamming_scores, sketch_rows

MODES = ("float", "bitwise")


@dataclass(frozen=True)
class BenchRow:
    """One timing: ``median_ns`` and ``std_ns`` are per cached token, ``bytes`` is key bytes per token."""

    context: int
    mode: str
    median_ns: float
    bytes: int
    std_ns: float
    repeats: int

    def to_json(self) -> dict:
        return asdict(self)


def time_call(fn: Callable[[], object], repeats: int, warmup: int) -> tuple[float, float]:
    """Median and standard deviation of wall time in ns, warmup runs discarded."""
    for _ in range(warmup):
        fn()
    samples = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    return float(np.median(samples)), float(samples.std())


@contextlib.contextmanager
def single_threaded():
    """Limit BLAS/OpenMP pools to one thread when threadpoolctl is available."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def key_bytes_per_token(mode: str, d: int, b: int, fp_width: int = 2) -> int:
    """Key bytes read per cached token: ``d * fp_width`` or ``ceil(b / 8)``."""
    if mode == "float":
        return d * fp_width
    if mode == "bitwise":
        return (b + 7) // 8
    raise ValueError(f"unknown bench mode {mode!r}")


def scoring_kernels(context: int, d: int, b: int, seed: int) -> dict[str, Callable[[], np.ndarray]]:
    """Closures scoring one query against ``context`` synthetic keys per mode.

    The float path reads FP16 keys and accumulates in f32; the bitwise path
    sketches the query and scores packed key words with xor/popcount.
    """
    keys = rng.standard_normal(rng.derive_seed(seed, 0), context * d).reshape(context, d)
    q = rng.standard_normal(rng.derive_seed(seed, 1), d)
    m = build_matrix(rng.derive_seed(seed, 2), b, d)
    keys16 = keys.astype(np.float16)
    q32 = q.astype(np.float32)
    inv_sqrt_d = np.float32(1.0 / math.sqrt(d))
    words = sketch_rows(m, keys)

    def float_path() -> np.ndarray:
        return (keys16.astype(np.float32) @ q32) * inv_sqrt_d

    def bitwise_path() -> np.ndarray:
        q_words = sketch_rows(m, q[None, :])[0]
        return hamming_scores(words, q_words, b)

    return {"float": float_path, "bitwise": bitwise_path}


def bench_scoring(
    contexts: Iterable[int],
    d: int = 64,
    b: int = 256,
    repeats: int = 30,
    warmup: int = 3,
    modes: Iterable[str] = MODES,
    seed: int = 0,
    fp_width: int = 2,
) -> list[BenchRow]:
    modes = list(modes)
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown bench mode {mode!r}; choose from {MODES}")
    if repeats < 1 or warmup < 0:
        raise ValueError("repeats must be >= 1 and warmup >= 0")
    if d < 1 or b < 1:
        raise ValueError("d and b must be >= 1")
    rows = []
    with single_threaded():
        for context in contexts:
            if context < 1:
                raise ValueError("context lengths must be >= 1")
            kernels = scoring_kernels(context, d, b, seed)
            for mode in modes:
                median, std = time_call(kernels[mode], repeats, warmup)
                rows.append(
                    BenchRow(
                        context,
                        mode,
                        median / context,
                        key_bytes_per_token(mode, d, b, fp_width),
                        std / context,
                        repeats,
                    )
                )
    return rows
