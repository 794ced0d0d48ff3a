"""Temperature-scaled attention over the hybrid cache, and temperature calibration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng
from .cache import CacheConfig, H1BCache, KeyMode
from .sketch import SketchMatrix, hamming_scores, head_matrix, sketch_rows

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AttentionConfig:
    """Softmax temperature plus the sketch/value settings it applies to.

    ``tau_overrides`` maps ``(layer, head)`` to a head-specific temperature.
    It is experimental: the calibrated quantity is a single global scalar.
    """

    tau: float = 1.0
    sketch_bits: int = 256
    head_dim: int = 64
    key_mode: KeyMode = KeyMode.SKETCH
    master_seed: int = 0
    tau_overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        check_tau(self.tau)
        for t in self.tau_overrides.values():
            check_tau(t)
        object.__setattr__(self, "key_mode", KeyMode(self.key_mode))

    @classmethod
    def from_cache(cls, config: CacheConfig, tau: float = 1.0) -> AttentionConfig:
        return cls(tau, config.sketch_bits, config.head_dim, config.key_mode, config.master_seed)

    def tau_for(self, layer: int, head: int) -> float:
        return self.tau_overrides.get((layer, head), self.tau)


@dataclass(frozen=True)
class AttentionOutput:
    weights: np.ndarray
    output: np.ndarray


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not (math.isfinite(tau) and tau > 0.0):
        raise ValueError(f"temperature must be finite and > 0, got {tau}")
    return tau


def softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / check_tau(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / check_tau(tau)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray, tau_p: float = 1.0, tau_q: float = 1.0) -> float:
    """KL(softmax(p/tau_p) || softmax(q/tau_q)) computed in log space."""
    lp = log_softmax(p_logits, tau_p)
    lq = log_softmax(q_logits, tau_q)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def exact_logits(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Scaled dot product ``K q / sqrt(d)`` of the reference path."""
    keys = np.asarray(keys, dtype=np.float64)
    return keys @ np.asarray(q, dtype=np.float64) / math.sqrt(keys.shape[-1])


def sketch_logits(q: np.ndarray, key_words: np.ndarray, matrix: SketchMatrix) -> np.ndarray:
    q_words = sketch_rows(matrix, np.asarray(q, dtype=np.float64)[None, :])[0]
    return hamming_scores(key_words, q_words, matrix.rows)


def score_context(q: np.ndarray, cache: H1BCache, layer: int, head: int) -> np.ndarray:
    """Attention logits of query ``q`` against every cached token of one head.

    Sketch mode returns normalized Hamming scores in [-1, 1]; exact mode the
    scaled dot products. Temperature is applied later, in :func:`attend`.
    """
    n = cache.length(layer, head)
    if n == 0:
        raise ValueError(f"no cached tokens for slot ({layer}, {head})")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (cache.config.head_dim,):
        raise ValueError(f"query must have shape ({cache.config.head_dim},)")
    keys = cache.key_matrix(layer, head)
    if cache.config.key_mode is KeyMode.SKETCH:
        return sketch_logits(q, keys, cache.matrix(layer, head))
    return exact_logits(q, keys)


def attend(q: np.ndarray, cache: H1BCache, layer: int, head: int, tau: float = 1.0) -> AttentionOutput:
    weights = softmax(score_context(q, cache, layer, head), tau)
    return AttentionOutput(weights, weights @ cache.value_matrix(layer, head))


def attend_with(q: np.ndarray, cache: H1BCache, layer: int, head: int, config: AttentionConfig) -> AttentionOutput:
    return attend(q, cache, layer, head, config.tau_for(layer, head))


@dataclass(frozen=True)
class CalibrationItem:
    """One query with its exact keys and values, tagged with the head it came from."""

    q: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    layer: int = 0
    head: int = 0

    def to_json(self) -> dict:
        return {
            "q": self.q.tolist(),
            "keys": self.keys.tolist(),
            "values": self.values.tolist(),
            "layer": self.layer,
            "head": self.head,
        }


def load_calibration_set(path: str | Path) -> list[CalibrationItem]:
    """Read a JSON array of ``{q, keys, values}`` records (``layer``/``head`` optional)."""
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ValueError("calibration file must hold a JSON array")
    items = []
    for i, rec in enumerate(records):
        try:
            q = np.asarray(rec["q"], dtype=np.float64)
            keys = np.asarray(rec["keys"], dtype=np.float64)
            values = np.asarray(rec["values"], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"record {i}: expected q, keys and values ({exc})") from None
        if q.ndim != 1 or keys.ndim != 2 or keys.shape[1] != q.size or values.shape[0] != keys.shape[0]:
            raise ValueError(f"record {i}: inconsistent shapes q{q.shape} keys{keys.shape} values{values.shape}")
        items.append(CalibrationItem(q, keys, values, int(rec.get("layer", 0)), int(rec.get("head", 0))))
    return items


def save_calibration_set(items: Iterable[CalibrationItem], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([it.to_json() for it in items], fh)


@dataclass(frozen=True)
class CalibrationResult:
    tau: float
    kl: float
    kl_at_one: float
    evaluations: int

    def to_json(self) -> dict:
        return {"tau": self.tau, "kl": self.kl, "kl_at_one": self.kl_at_one, "evaluations": self.evaluations}


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float) -> tuple[float, float, int]:
    """Minimize a unimodal ``f`` on ``[lo, hi]``; returns (x, f(x), evaluations)."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    evals = 2
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        evals += 1
    return (c, fc, evals) if fc <= fd else (d, fd, evals)


def calibration_logits(
    items: Sequence[CalibrationItem], config: CacheConfig | AttentionConfig
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(exact logits, sketch logits) for each item, using each item's head matrix."""
    matrices: dict[tuple[int, int], SketchMatrix] = {}
    pairs = []
    for it in items:
        if it.keys.shape[1] != config.head_dim:
            raise ValueError(f"calibration item has d={it.keys.shape[1]}, config expects {config.head_dim}")
        key = (it.layer, it.head)
        if key not in matrices:
            matrices[key] = head_matrix(config.master_seed, it.layer, it.head, config.sketch_bits, config.head_dim)
        m = matrices[key]
        approx = sketch_logits(it.q, sketch_rows(m, it.keys), m)
        pairs.append((exact_logits(it.q, it.keys), approx))
    return pairs


def mean_kl(pairs: Sequence[tuple[np.ndarray, np.ndarray]], tau: float) -> float:
    """Mean KL(exact attention || sketch attention at temperature tau)."""
    return float(np.mean([kl_divergence(e, s, 1.0, tau) for e, s in pairs]))


def calibrate_tau(
    items: Sequence[CalibrationItem],
    config: CacheConfig | AttentionConfig,
    search_range: tuple[float, float] = (1e-3, 1e3),
    tol: float = 1e-3,
) -> CalibrationResult:
    """Pick the global temperature that best matches sketch attention to exact attention.

    Golden-section search over ``log(tau)`` to ``tol`` in log space. If 1.0
    lies in the search range and scores no worse than the search result,
    1.0 is returned instead, so calibration never does worse than tau = 1.
    """
    if len(items) == 0:
        raise ValueError("calibration set is empty")
    lo, hi = (float(x) for x in search_range)
    if not (0.0 < lo < hi and math.isfinite(hi)):
        raise ValueError(f"search range must satisfy 0 < lo < hi, got ({lo}, {hi})")
    pairs = calibration_logits(items, config)

    def objective(log_tau: float) -> float:
        return mean_kl(pairs, math.exp(log_tau))

    log_tau, best, evals = golden_section(objective, math.log(lo), math.log(hi), tol)
    tau = math.exp(log_tau)
    kl_one = mean_kl(pairs, 1.0)
    if lo <= 1.0 <= hi and kl_one <= best:
        tau, best = 1.0, kl_one
    return CalibrationResult(tau, best, kl_one, evals + 1)


def synthetic_items(seed: int, n: int, tokens: int, d: int, key_spread: float = 3.0) -> list[CalibrationItem]:
    """Random calibration contexts: unit query, keys correlated with it, Gaussian values.

    ``key_spread`` scales the query/key alignment so that exact attention is
    peaked enough to be worth matching.
    """
    items = []
    for i in range(n):
        s = rng.derive_seed(seed, i)
        q = rng.unit_vectors(rng.derive_seed(s, 0), 1, d)[0]
        keys = rng.standard_normal(rng.derive_seed(s, 1), tokens * d).reshape(tokens, d)
        pull = rng.standard_normal(rng.derive_seed(s, 2), tokens)[:, None] * key_spread
        keys = keys + pull * q
        values = rng.standard_normal(rng.derive_seed(s, 3), tokens * d).reshape(tokens, d)
        items.append(CalibrationItem(q, keys, values))
    return items
