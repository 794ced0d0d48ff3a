"""A small deterministic decoder-only transformer with a pluggable KV cache.

Pre-norm blocks, GELU MLP with 4x expansion, learned positional embeddings,
byte-level vocabulary, greedy decoding. No rotary embeddings, so keys reach
the cache exactly as the K projection produced them.

The model exists to compare cache backends on identical weights; it is never
trained.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from . import rng
from .attention import (
    CalibrationItem,
    CalibrationResult,
    attend,
    calibrate_tau,
    kl_divergence,
    log_softmax,
    softmax,
)
from .cache import CacheConfig, H1BCache, KeyMode, PRESETS

TENSOR_MAGIC = b"H1BT"
TENSOR_VERSION = 1
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    max_context: int = 512
    weight_seed: int = 0
    qk_norm: bool = True

    def __post_init__(self) -> None:
        dims = (self.n_layers, self.d_model, self.n_heads, self.vocab_size, self.max_context)
        if min(dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def cache_config(self, preset: str = "reference", sketch_bits: int = 256, master_seed: int = 0) -> CacheConfig:
        return CacheConfig.preset(
            preset,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            sketch_bits=sketch_bits,
            master_seed=master_seed,
        )


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    head: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, lw in enumerate(self.layers):
            for name, arr in vars(lw).items():
                out[f"layers.{i}.{name}"] = arr
        out["lnf_g"] = self.lnf_g
        out["lnf_b"] = self.lnf_b
        out["head"] = self.head
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelWeights:
        try:
            layers = [
                LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LayerWeights.__dataclass_fields__})
                for i in range(config.n_layers)
            ]
            w = cls(config, tensors["tok_emb"], tensors["pos_emb"], layers, tensors["lnf_g"], tensors["lnf_b"], tensors["head"])
        except KeyError as exc:
            raise ValueError(f"weights file is missing tensor {exc}") from None
        w.validate()
        return w

    def validate(self) -> None:
        c = self.config
        D, F = c.d_model, 4 * c.d_model
        expected = {
            "tok_emb": (c.vocab_size, D),
            "pos_emb": (c.max_context, D),
            "lnf_g": (D,),
            "lnf_b": (D,),
            "head": (D, c.vocab_size),
        }
        layer_shapes = {
            "ln1_g": (D,), "ln1_b": (D,), "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
            "ln2_g": (D,), "ln2_b": (D,), "w1": (D, F), "b1": (F,), "w2": (F, D), "b2": (D,),
        }
        for i in range(c.n_layers):
            for n, shp in layer_shapes.items():
                expected[f"layers.{i}.{n}"] = shp
        tensors = self.tensors()
        for name, shape in expected.items():
            arr = tensors.get(name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise ValueError(f"tensor {name}: expected shape {shape}, got {got}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name} has non-finite entries")


def init_weights(config: ModelConfig, weight_seed: int | None = None) -> ModelWeights:
    """Seeded Gaussian init, std ``1/sqrt(fan_in)`` for projections.

    Embedding tables use std 1 (a lookup has fan-in 1). Layer-norm gains
    start at 1 and all biases at 0. Tensor ``i`` in :meth:`ModelWeights.tensors`
    order draws from stream ``derive_seed(weight_seed, i)``.
    """
    seed = config.weight_seed if weight_seed is None else weight_seed
    D, F, V = config.d_model, 4 * config.d_model, config.vocab_size
    counter = iter(range(1 << 30))

    def gauss(rows: int, cols: int, std: float) -> np.ndarray:
        return rng.standard_normal(rng.derive_seed(seed, next(counter)), rows * cols).reshape(rows, cols) * std

    tok_emb = gauss(V, D, 1.0)
    pos_emb = gauss(config.max_context, D, 1.0)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                ln1_g=np.ones(D), ln1_b=np.zeros(D),
                wq=gauss(D, D, D**-0.5), wk=gauss(D, D, D**-0.5),
                wv=gauss(D, D, D**-0.5), wo=gauss(D, D, D**-0.5),
                ln2_g=np.ones(D), ln2_b=np.zeros(D),
                w1=gauss(D, F, D**-0.5), b1=np.zeros(F),
                w2=gauss(F, D, F**-0.5), b2=np.zeros(D),
            )
        )
    head = gauss(D, V, D**-0.5)
    return ModelWeights(
        replace(config, weight_seed=seed),
        tok_emb, pos_emb, layers, np.ones(D), np.zeros(D), head,
    )


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def rms_norm(x: np.ndarray) -> np.ndarray:
    """Scale the last axis to unit RMS (no learned gain)."""
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _mlp(lw: LayerWeights, x: np.ndarray) -> np.ndarray:
    h = layer_norm(x, lw.ln2_g, lw.ln2_b)
    return gelu(h @ lw.w1 + lw.b1) @ lw.w2 + lw.b2


def forward_full(weights: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    """Cache-free causal forward pass over a whole sequence; logits ``(T, vocab)``."""
    c = weights.config
    tokens = _check_tokens(c, tokens)
    T, H, hd = len(tokens), c.n_heads, c.head_dim
    x = weights.tok_emb[tokens] + weights.pos_emb[:T]
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    for lw in weights.layers:
        h = layer_norm(x, lw.ln1_g, lw.ln1_b)
        q = (h @ lw.wq).reshape(T, H, hd).transpose(1, 0, 2)
        k = (h @ lw.wk).reshape(T, H, hd).transpose(1, 0, 2)
        v = (h @ lw.wv).reshape(T, H, hd).transpose(1, 0, 2)
        if c.qk_norm:
            q, k = rms_norm(q), rms_norm(k)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
        scores = np.where(causal, -np.inf, scores)
        att = softmax(scores) @ v
        x = x + att.transpose(1, 0, 2).reshape(T, c.d_model) @ lw.wo
        x = x + _mlp(lw, x)
    return layer_norm(x, weights.lnf_g, weights.lnf_b) @ weights.head


def _check_tokens(config: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D list")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    if tokens.size > config.max_context:
        raise ValueError(f"sequence of {tokens.size} tokens exceeds max_context={config.max_context}")
    return tokens


class Decoder:
    """Incremental decoder that keeps its keys and values in an :class:`H1BCache`.

    ``tau`` is the softmax temperature for sketch-key caches; exact-key
    caches always use the standard temperature 1.
    """

    def __init__(
        self,
        weights: ModelWeights,
        cache_config: CacheConfig | None = None,
        tau: float = 1.0,
        record: bool = False,
    ):
        c = weights.config
        if cache_config is None:
            cache_config = c.cache_config("reference")
        if (cache_config.n_layers, cache_config.n_heads, cache_config.head_dim) != (c.n_layers, c.n_heads, c.head_dim):
            raise ValueError("cache shape does not match the model")
        self.weights = weights
        self.cache = H1BCache(cache_config)
        self.tau = tau if cache_config.key_mode is KeyMode.SKETCH else 1.0
        self.position = 0
        self.records: list[CalibrationItem] | None = [] if record else None

    def step(self, token: int) -> np.ndarray:
        """Consume one token and return next-token logits."""
        w, c = self.weights, self.weights.config
        if self.position >= c.max_context:
            raise ValueError(f"context overflow: max_context={c.max_context}")
        if not 0 <= token < c.vocab_size:
            raise ValueError(f"token {token} outside vocabulary")
        H, hd = c.n_heads, c.head_dim
        x = w.tok_emb[token] + w.pos_emb[self.position]
        for li, lw in enumerate(w.layers):
            h = layer_norm(x, lw.ln1_g, lw.ln1_b)
            q = (h @ lw.wq).reshape(H, hd)
            k = (h @ lw.wk).reshape(H, hd)
            v = (h @ lw.wv).reshape(H, hd)
            if c.qk_norm:
                q, k = rms_norm(q), rms_norm(k)
            self.cache.append_heads(li, k, v)
            heads = []
            for hi in range(H):
                heads.append(attend(q[hi], self.cache, li, hi, self.tau).output)
                if self.records is not None:
                    self.records.append(
                        CalibrationItem(
                            q[hi].copy(),
                            self.cache.key_matrix(li, hi),
                            self.cache.value_matrix(li, hi),
                            li,
                            hi,
                        )
                    )
            x = x + np.concatenate(heads) @ lw.wo
            x = x + _mlp(lw, x)
        self.position += 1
        return layer_norm(x, w.lnf_g, w.lnf_b) @ w.head

    def feed(self, tokens: Sequence[int]) -> np.ndarray:
        """Consume a token sequence; returns logits after each token ``(T, vocab)``."""
        return np.stack([self.step(int(t)) for t in tokens])


def greedy_decode(
    weights: ModelWeights,
    prompt: Sequence[int],
    steps: int,
    cache_config: CacheConfig | None = None,
    tau: float = 1.0,
) -> tuple[list[int], np.ndarray]:
    """Greedy continuation of ``prompt``; returns (generated tokens, logits per step)."""
    prompt = _check_tokens(weights.config, prompt)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if prompt.size + steps - 1 > weights.config.max_context:
        raise ValueError("prompt plus generated tokens exceed max_context")
    dec = Decoder(weights, cache_config, tau)
    for t in prompt[:-1]:
        dec.step(int(t))
    out_tokens, out_logits = [], []
    last = int(prompt[-1])
    for _ in range(steps):
        step_logits = dec.step(last)
        last = int(np.argmax(step_logits))
        out_tokens.append(last)
        out_logits.append(step_logits)
    return out_tokens, np.stack(out_logits)


def collect_calibration_items(
    weights: ModelWeights, tokens: Sequence[int], min_context: int = 2
) -> list[CalibrationItem]:
    """Per-head (query, exact keys, exact values) captured during a reference run."""
    dec = Decoder(weights, weights.config.cache_config("reference"), record=True)
    dec.feed(_check_tokens(weights.config, tokens).tolist())
    return [it for it in dec.records if it.keys.shape[0] >= min_context]


def calibrate_model_tau(
    weights: ModelWeights,
    tokens: Sequence[int],
    cache_config: CacheConfig,
    search_range: tuple[float, float] = (1e-3, 1e3),
) -> CalibrationResult:
    """Global temperature for ``cache_config`` fitted on a reference run over ``tokens``."""
    items = collect_calibration_items(weights, tokens)
    return calibrate_tau(items, cache_config, search_range)


@dataclass
class FidelityReport:
    kl_per_step: list[float]
    agreement: float
    free_run_agreement: float
    tokens_a: list[int]
    tokens_b: list[int]
    bytes_a: int
    bytes_b: int
    tau_a: float
    tau_b: float
    config_a: dict = field(default_factory=dict)
    config_b: dict = field(default_factory=dict)

    @property
    def mean_kl(self) -> float:
        return float(np.mean(self.kl_per_step))

    @property
    def max_kl(self) -> float:
        return float(np.max(self.kl_per_step))

    def to_json(self) -> dict:
        return {
            "mean_kl": self.mean_kl,
            "max_kl": self.max_kl,
            "agreement": self.agreement,
            "free_run_agreement": self.free_run_agreement,
            "bytes_a": self.bytes_a,
            "bytes_b": self.bytes_b,
            "tau_a": self.tau_a,
            "tau_b": self.tau_b,
            "kl_per_step": self.kl_per_step,
            "tokens_a": self.tokens_a,
            "tokens_b": self.tokens_b,
            "config_a": self.config_a,
            "config_b": self.config_b,
        }


def _resolve_tau(weights: ModelWeights, prompt: np.ndarray, config: CacheConfig, tau: float | None) -> float:
    if config.key_mode is not KeyMode.SKETCH:
        return 1.0
    if tau is None:
        if prompt.size < 2:
            raise ValueError("calibrating tau needs a prompt of at least 2 tokens")
        return calibrate_model_tau(weights, prompt, config).tau
    return float(tau)


def decode_compare(
    weights: ModelWeights,
    prompt: Sequence[int],
    steps: int,
    config_a: CacheConfig,
    config_b: CacheConfig,
    tau: float | None = None,
) -> FidelityReport:
    """Compare next-token distributions of two cache backends on one greedy trajectory.

    Run A decodes greedily. Run B is fed A's tokens (teacher forcing), so at
    every step both runs see the same context and ``KL(A || B)`` and top-1
    agreement compare like with like. B is also decoded freely and
    ``free_run_agreement`` is the fraction of positions where the two
    greedy continuations coincide.

    ``tau=None`` calibrates the temperature of each sketch-key config on the
    prompt; a number is used as-is. Exact-key configs always use 1.
    """
    prompt_arr = _check_tokens(weights.config, prompt)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if prompt_arr.size + steps - 1 > weights.config.max_context:
        raise ValueError("prompt plus generated tokens exceed max_context")
    tau_a = _resolve_tau(weights, prompt_arr, config_a, tau)
    tau_b = _resolve_tau(weights, prompt_arr, config_b, tau)

    tokens_a, logits_a = greedy_decode(weights, prompt_arr, steps, config_a, tau_a)
    dec_b = Decoder(weights, config_b, tau_b)
    forced = prompt_arr.tolist() + tokens_a[:-1]
    logits_b = dec_b.feed(forced)[prompt_arr.size - 1 :]
    if config_a == config_b and tau_a == tau_b:
        tokens_b = list(tokens_a)
    else:
        tokens_b, _ = greedy_decode(weights, prompt_arr, steps, config_b, tau_b)

    kls = [kl_divergence(a, b) for a, b in zip(logits_a, logits_b)]
    agree = float(np.mean(np.argmax(logits_a, axis=1) == np.argmax(logits_b, axis=1)))
    free = float(np.mean(np.asarray(tokens_a) == np.asarray(tokens_b)))
    tokens_total = prompt_arr.size + steps - 1
    return FidelityReport(
        kls, agree, free, tokens_a, tokens_b,
        config_a.size_for(tokens_total), config_b.size_for(tokens_total),
        tau_a, tau_b, config_a.to_json(), config_b.to_json(),
    )


def pseudo_perplexity(
    weights: ModelWeights,
    corpus: Sequence[int],
    cache_config: CacheConfig | None = None,
    tau: float = 1.0,
) -> float:
    """``exp`` of the mean next-token negative log-likelihood over ``corpus``.

    ``cache_config=None`` uses the cache-free full forward pass.
    """
    tokens = _check_tokens(weights.config, corpus)
    if tokens.size < 2:
        raise ValueError("corpus must hold at least 2 tokens")
    if cache_config is None:
        logits = forward_full(weights, tokens[:-1])
    else:
        logits = Decoder(weights, cache_config, tau).feed(tokens[:-1].tolist())
    logp = log_softmax(logits)
    nll = -logp[np.arange(tokens.size - 1), tokens[1:]]
    return float(np.exp(nll.mean()))


def encode_text(text: str | bytes) -> list[int]:
    """Byte-level tokens."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def read_corpus(path: str | Path) -> list[int]:
    return list(Path(path).read_bytes())


def write_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Append records: magic, version u32, name, ndim u32, dims u32[], f32 payload (all LE)."""
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, len(raw)) + raw)
        fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_tensors(data: bytes) -> dict[str, np.ndarray]:
    out = {}
    off = 0
    while off < len(data):
        if data[off : off + 4] != TENSOR_MAGIC:
            raise ValueError(f"bad tensor record magic at byte {off}")
        version, name_len = struct.unpack_from("<II", data, off + 4)
        if version != TENSOR_VERSION:
            raise ValueError(f"unsupported tensor version {version}")
        off += 12
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", data, off)
        dims = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        end = off + 4 * count
        if end > len(data):
            raise ValueError(f"tensor {name} is truncated")
        out[name] = np.frombuffer(data[off:end], dtype="<f4").astype(np.float64).reshape(dims)
        off = end
    return out


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, weights.tensors())


def load_weights(path: str | Path, config: ModelConfig) -> ModelWeights:
    return ModelWeights.from_tensors(config, read_tensors(Path(path).read_bytes()))


__all__ = [
    "ModelConfig",
    "ModelWeights",
    "Decoder",
    "FidelityReport",
    "PRESETS",
    "init_weights",
    "forward_full",
    "greedy_decode",
    "decode_compare",
    "pseudo_perplexity",
    "collect_calibration_items",
    "calibrate_model_tau",
    "save_weights",
    "load_weights",
]
