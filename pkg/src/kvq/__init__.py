"""Low-bit KV-cache quantization: per-channel pre-RoPE Keys, per-token Values,
sensitivity-weighted non-uniform codebooks and dense-and-sparse outliers."""

from kvq.kvcache import (
    KeyQuantizer,
    QuantConfig,
    QuantizedKVCache,
    ValueQuantizer,
    av_matvec,
    calibrate_key_quantizer,
    calibrate_value_quantizer,
    qk_scores,
)
from kvq.nuq import NuqCodebook, derive_codebook, fit_weighted_kmeans_1d
from kvq.planner import PlanConfig, PlanReport, avg_bits, compression_ratio, plan
from kvq.rope import RopeParams, rope_apply, rope_apply_inverse
from kvq.tensor_io import CalibrationSet, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "CalibrationSet",
    "KeyQuantizer",
    "NuqCodebook",
    "PlanConfig",
    "PlanReport",
    "QuantConfig",
    "QuantizedKVCache",
    "RopeParams",
    "ValueQuantizer",
    "av_matvec",
    "avg_bits",
    "calibrate_key_quantizer",
    "calibrate_value_quantizer",
    "compression_ratio",
    "derive_codebook",
    "fit_weighted_kmeans_1d",
    "plan",
    "qk_scores",
    "read_tensor",
    "rope_apply",
    "rope_apply_inverse",
    "write_tensor",
]
