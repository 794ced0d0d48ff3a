"""KV cache with sign-sketched keys, 4-bit values and temperature-calibrated attention."""

from .attention import (
    AttentionConfig,
    AttentionOutput,
    CalibrationItem,
    CalibrationResult,
    attend,
    calibrate_tau,
    score_context,
)
from .cache import CacheConfig, H1BCache, KeyMode, ValueMode, compression_report
from .quant import QuantizedVector, dequantize, quantize
from .sketch import (
    PackedSketch,
    SketchMatrix,
    build_matrix,
    estimate_similarity_curve,
    hamming_score,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "CacheConfig",
    "CalibrationItem",
    "CalibrationResult",
    "H1BCache",
    "KeyMode",
    "PackedSketch",
    "QuantizedVector",
    "SketchMatrix",
    "ValueMode",
    "attend",
    "build_matrix",
    "calibrate_tau",
    "compression_report",
    "dequantize",
    "estimate_similarity_curve",
    "hamming_score",
    "quantize",
    "score_context",
]
