"""Quantized KV cache: offline per-channel Keys (pre-RoPE), online per-token Values.

Each cached element is a low-bit code into a per-layer nuq codebook plus a
per-vector affine. Elements outside the vector's kept range go to a sparse
structure as float64 residuals, so dense + sparse reproduces them exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kvq.nuq import (
    AffineParams,
    NuqCodebook,
    affine_arrays,
    apply_qnorm,
    derive_codebook,
    encode_array,
    qnorm_stats,
)
from kvq.packing import PackedRows, PackedStream
from kvq.rope import RopeParams, rope_apply, rotate_half
from kvq.sparse import (
    SparseCSC,
    SparseCSR,
    balanced_segment_sum,
    balanced_spmv_csr,
    outlier_count,
    outlier_thresholds,
)
from kvq.tensor_io import read_tensor, write_tensor

PASSTHROUGH_BITS = 16


@dataclass(frozen=True)
class QuantConfig:
    """Quantization settings for one cache.

    ``bits=16`` means no quantization (simulator passthrough). The axis and
    RoPE fields exist for ablations; the packed cache only implements the
    defaults (per-channel pre-RoPE Keys, per-token Values).
    """

    bits: int = 4
    outlier_fraction: float = 0.01
    qnorm: bool = False
    fisher_weighted: bool = True
    threshold_mode: str = "vector"
    key_axis: str = "channel"
    value_axis: str = "token"
    key_rope: str = "pre"

    def __post_init__(self) -> None:
        if self.bits not in (2, 3, 4, PASSTHROUGH_BITS):
            raise ValueError(f"bits must be 2, 3, 4 (or 16 for passthrough), got {self.bits}")
        if not 0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier_fraction must be in [0, 0.5)")
        if self.threshold_mode not in ("vector", "matrix"):
            raise ValueError("threshold_mode must be 'vector' or 'matrix'")
        if self.key_axis not in ("channel", "token") or self.value_axis not in ("channel", "token"):
            raise ValueError("axes must be 'channel' or 'token'")
        if self.key_rope not in ("pre", "post"):
            raise ValueError("key_rope must be 'pre' or 'post'")

    @property
    def passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS

    @property
    def is_default_layout(self) -> bool:
        return self.key_axis == "channel" and self.value_axis == "token" and self.key_rope == "pre"


def _dense_dequant(codes: np.ndarray, levels: np.ndarray, scale, offset, degenerate) -> np.ndarray:
    eff = np.where(degenerate, np.float32(0), scale).astype(np.float32)
    return (levels[codes] * eff + np.asarray(offset, dtype=np.float32)).astype(np.float32)


def _normalize(x: np.ndarray, scale, offset, degenerate) -> np.ndarray:
    xn = (x - np.asarray(offset, dtype=np.float32)) / np.asarray(scale, dtype=np.float32)
    return np.where(degenerate, np.float32(0), xn).astype(np.float32)


@dataclass
class Quantized:
    """Output of a quantizer on ``[tokens, d]``: dense codes, per-vector affine, sparse residuals."""

    codes: np.ndarray          # [T, d] uint8
    outliers: np.ndarray       # [T, d] bool
    residuals: np.ndarray      # [T, d] float64, zero off the outlier mask
    scale: np.ndarray
    offset: np.ndarray
    degenerate: np.ndarray
    dense: np.ndarray          # [T, d] float32 dense-path reconstruction

    def reconstruct(self) -> np.ndarray:
        return (self.dense.astype(np.float64) + self.residuals).astype(np.float32)


# --- per-channel, offline thresholds ------------------------------------------


@dataclass
class KeyQuantizer:
    """Per-channel quantizer with thresholds frozen at calibration time.

    Used for Keys (pre-RoPE, ``rope`` set so the kernel rotates after
    dequantization) and, in ablations, for per-channel Values.
    """

    lo: np.ndarray
    hi: np.ndarray
    codebook: NuqCodebook
    rope: RopeParams | None = None
    scale: np.ndarray = field(init=False)
    offset: np.ndarray = field(init=False)
    degenerate: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float32)
        self.hi = np.asarray(self.hi, dtype=np.float32)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo/hi must be matching 1-D arrays")
        if self.rope is not None and len(self.lo) % self.rope.head_dim:
            raise ValueError(f"{len(self.lo)} channels are not a whole number of RoPE heads")
        self.scale, self.offset, self.degenerate = affine_arrays(self.lo, self.hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def affine(self, c: int) -> AffineParams:
        return AffineParams(float(self.scale[c]), float(self.offset[c]), bool(self.degenerate[c]))

    def quantize(self, x) -> Quantized:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}, got {x.shape[-1]}")
        outliers = (x < self.lo) | (x > self.hi)
        clamped = np.clip(x, self.lo, self.hi)
        codes = encode_array(_normalize(clamped, self.scale, self.offset, self.degenerate), self.codebook)
        dense = _dense_dequant(codes, self.codebook.levels, self.scale, self.offset, self.degenerate)
        residuals = np.where(outliers, x.astype(np.float64) - dense.astype(np.float64), 0.0)
        return Quantized(codes, outliers, residuals, self.scale, self.offset, self.degenerate, dense)

    def fake_quantize(self, x) -> np.ndarray:
        return self.quantize(x).reconstruct()

    def to_dict(self) -> dict:
        return {
            "kind": "per_channel",
            "lo": [float(v) for v in self.lo],
            "hi": [float(v) for v in self.hi],
            "codebook": self.codebook.to_dict(),
            "rope": None if self.rope is None else {"head_dim": self.rope.head_dim, "theta_base": self.rope.theta_base},
        }

    @classmethod
    def from_dict(cls, d: dict) -> KeyQuantizer:
        rope = None if d.get("rope") is None else RopeParams(d["rope"]["head_dim"], d["rope"]["theta_base"])
        return cls(np.asarray(d["lo"], np.float32), np.asarray(d["hi"], np.float32),
                   NuqCodebook.from_dict(d["codebook"]), rope)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KeyQuantizer):
            return NotImplemented
        return (np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)
                and self.codebook == other.codebook and self.rope == other.rope)


# --- per-token, online thresholds ---------------------------------------------


def token_outlier_mask(x: np.ndarray, f: float) -> np.ndarray:
    """Row-wise two-sided outlier selection, identical to ``vector_outlier_split`` per row."""
    t, d = x.shape
    n_out = outlier_count(f, d)
    if n_out >= d:
        raise ValueError(f"{n_out} outliers leave nothing to keep in a length-{d} vector")
    mask = np.zeros((t, d), dtype=bool)
    if n_out == 0 or t == 0:
        return mask
    n_upper, n_lower = -(-n_out // 2), n_out // 2
    rows = np.arange(t)[:, None]
    up = np.argsort(-x, axis=1, kind="stable")[:, :n_upper]
    mask[rows, up] = True
    if n_lower:
        masked = np.where(mask, np.inf, x)
        low = np.argsort(masked, axis=1, kind="stable")[:, :n_lower]
        mask[rows, low] = True
    return mask


@dataclass
class ValueQuantizer:
    """Per-token quantizer; thresholds and affine are computed for each incoming vector.

    With ``fixed_range`` set (per-matrix threshold ablation) the outlier
    rule is a single calibrated ``(lo, hi)`` for the whole layer.
    """

    codebook: NuqCodebook
    outlier_fraction: float
    fixed_range: tuple[float, float] | None = None

    def quantize(self, x) -> Quantized:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if self.fixed_range is None:
            outliers = token_outlier_mask(x, self.outlier_fraction)
        else:
            outliers = (x < self.fixed_range[0]) | (x > self.fixed_range[1])
        kept_any = ~outliers
        # rows with nothing kept collapse onto the clamp of their mean
        fallback = np.clip(x.mean(axis=1), *(self.fixed_range or (-np.inf, np.inf))).astype(np.float32)
        lo = np.where(kept_any.any(axis=1), np.where(kept_any, x, np.inf).min(axis=1), fallback)
        hi = np.where(kept_any.any(axis=1), np.where(kept_any, x, -np.inf).max(axis=1), fallback)
        scale, offset, degenerate = affine_arrays(lo, hi)
        clamped = np.clip(x, lo[:, None], hi[:, None])
        codes = encode_array(
            _normalize(clamped, scale[:, None], offset[:, None], degenerate[:, None]), self.codebook
        )
        dense = _dense_dequant(codes, self.codebook.levels, scale[:, None], offset[:, None], degenerate[:, None])
        residuals = np.where(outliers, x.astype(np.float64) - dense.astype(np.float64), 0.0)
        return Quantized(codes, outliers, residuals, scale, offset, degenerate, dense)

    def fake_quantize(self, x) -> np.ndarray:
        return self.quantize(x).reconstruct()

    def to_dict(self) -> dict:
        return {
            "kind": "per_token",
            "outlier_fraction": self.outlier_fraction,
            "fixed_range": None if self.fixed_range is None else [float(v) for v in self.fixed_range],
            "codebook": self.codebook.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ValueQuantizer:
        fr = d.get("fixed_range")
        return cls(NuqCodebook.from_dict(d["codebook"]), float(d["outlier_fraction"]),
                   None if fr is None else (float(fr[0]), float(fr[1])))


# --- calibration ----------------------------------------------------------------


def _pool(samples: Sequence[np.ndarray], what: str) -> np.ndarray:
    if len(samples) == 0:
        raise ValueError(f"empty {what}")
    d = samples[0].shape[-1]
    for s in samples:
        if s.ndim != 2 or s.shape[-1] != d:
            raise ValueError(f"{what} must be [tokens, {d}] matrices")
    return np.concatenate([np.asarray(s, dtype=np.float32) for s in samples], axis=0)


def _pool_weights(weights, x: np.ndarray, cfg: QuantConfig) -> np.ndarray | None:
    if weights is None or not cfg.fisher_weighted:
        return None
    w = _pool(weights, "fisher weights") if isinstance(weights, (list, tuple)) else np.asarray(weights)
    if w.shape != x.shape:
        raise ValueError(f"fisher shape {w.shape} != calibration shape {x.shape}")
    return w.astype(np.float64)


def _fit_codebook(xn: np.ndarray, w: np.ndarray | None, cfg: QuantConfig) -> NuqCodebook:
    if w is not None and not w.sum() > 0:
        w = None
    cb = derive_codebook(xn, w, cfg.bits)
    if cfg.qnorm:
        cb = apply_qnorm(cb, qnorm_stats(xn, cb))
    return cb


def calibrate_key_quantizer(
    samples: Sequence[np.ndarray],
    fisher=None,
    cfg: QuantConfig = QuantConfig(),
    rope: RopeParams | None = None,
) -> KeyQuantizer:
    """Offline per-channel calibration over pooled ``[tokens, d]`` samples.

    ``fisher`` is per-element weights matching the samples (list, or one
    array of the pooled shape); ignored when ``cfg.fisher_weighted`` is off.
    """
    x = _pool(samples, "calibration set")
    w = _pool_weights(fisher, x, cfg)
    f = cfg.outlier_fraction
    if cfg.threshold_mode == "vector":
        lo, hi = outlier_thresholds(x, f, axis=0)
    else:
        lo_m, hi_m = outlier_thresholds(x.reshape(-1), f, axis=0)
        inside = (x >= lo_m) & (x <= hi_m)
        any_in = inside.any(axis=0)
        fallback = np.clip(x.mean(axis=0), lo_m, hi_m).astype(np.float32)
        lo = np.where(any_in, np.where(inside, x, np.inf).min(axis=0), fallback).astype(np.float32)
        hi = np.where(any_in, np.where(inside, x, -np.inf).max(axis=0), fallback).astype(np.float32)
    scale, offset, degenerate = affine_arrays(lo, hi)
    kept = (x >= lo) & (x <= hi)
    xn = _normalize(x, scale, offset, degenerate)
    cb = _fit_codebook(xn[kept], None if w is None else w[kept], cfg)
    return KeyQuantizer(lo, hi, cb, rope)


def calibrate_value_quantizer(samples: Sequence[np.ndarray], fisher=None, cfg: QuantConfig = QuantConfig()) -> ValueQuantizer:
    """Derive the per-token quantizer's codebook; thresholds stay online."""
    x = _pool(samples, "calibration set")
    w = _pool_weights(fisher, x, cfg)
    fixed = None
    if cfg.threshold_mode == "matrix":
        lo_m, hi_m = outlier_thresholds(x.reshape(-1), cfg.outlier_fraction, axis=0)
        fixed = (float(lo_m), float(hi_m))
    # codebook-free pass to get each token's kept range and normalized values
    probe = ValueQuantizer(NuqCodebook(2, np.linspace(-1, 1, 4)), cfg.outlier_fraction, fixed).quantize(x)
    kept = ~probe.outliers
    xn = _normalize(x, probe.scale[:, None], probe.offset[:, None], probe.degenerate[:, None])
    cb = _fit_codebook(xn[kept], None if w is None else w[kept], cfg)
    return ValueQuantizer(cb, cfg.outlier_fraction, fixed)


# --- the cache --------------------------------------------------------------------


class QuantizedKVCache:
    """Append-only quantized cache for one layer (``n_heads`` heads side by side).

    Keys: channel-major packed codes, CSC residuals, per-channel affine from
    the KeyQuantizer. Values: token-major packed codes, CSR residuals,
    per-token affine (over the full hidden vector) stored at append time.
    Appends go Key then Value.
    """

    def __init__(self, kq: KeyQuantizer, vq: ValueQuantizer, n_heads: int = 1):
        if n_heads < 1 or kq.dim % n_heads:
            raise ValueError(f"{kq.dim} channels do not split into {n_heads} heads")
        if kq.rope is not None and kq.rope.head_dim * n_heads != kq.dim:
            raise ValueError("RoPE head_dim * n_heads must equal the key width")
        self.kq = kq
        self.vq = vq
        self.dim = kq.dim
        self.n_heads = n_heads
        self.head_dim = kq.dim // n_heads
        self.key_codes = PackedRows(self.dim, kq.codebook.bits)
        self.key_sparse = SparseCSC(self.dim)
        self.value_codes = PackedStream(vq.codebook.bits)
        self.value_sparse = SparseCSR(self.dim)
        self._v_scale: list[np.ndarray] = []
        self._v_offset: list[np.ndarray] = []
        self._v_degenerate: list[np.ndarray] = []
        self.token_count = 0
        self._pending_key = False

    # appends ------------------------------------------------------------------

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}, got {x.shape[-1]}")
        return x

    def _store_keys(self, x: np.ndarray) -> None:
        q = self.kq.quantize(x)
        self.key_codes.extend_columns(q.codes.T)
        t_idx, c_idx = np.nonzero(q.outliers)  # row-major: token order, channels ascending
        counts = q.outliers.sum(axis=1)
        self.key_sparse._append_many(counts, c_idx, q.residuals[t_idx, c_idx])

    def _store_values(self, x: np.ndarray) -> None:
        q = self.vq.quantize(x)
        self.value_codes.extend(q.codes.reshape(-1))
        t_idx, c_idx = np.nonzero(q.outliers)
        self.value_sparse._append_many(q.outliers.sum(axis=1), c_idx, q.residuals[t_idx, c_idx])
        self._v_scale.append(q.scale)
        self._v_offset.append(q.offset)
        self._v_degenerate.append(q.degenerate)

    def append_key(self, k) -> None:
        k = self._check(k).reshape(1, -1)
        if self._pending_key:
            raise RuntimeError("append_value must follow append_key")
        self._store_keys(k)
        self._pending_key = True

    def append_value(self, v) -> None:
        v = self._check(v).reshape(1, -1)
        if not self._pending_key:
            raise RuntimeError("append_key must precede append_value")
        self._store_values(v)
        self._pending_key = False
        self.token_count += 1

    def extend(self, keys, values) -> None:
        """Bulk append of ``[T, d]`` keys and values (same result as T paired appends)."""
        keys, values = self._check(keys), self._check(values)
        if keys.shape != values.shape or keys.ndim != 2:
            raise ValueError("keys and values must both be [T, d]")
        if self._pending_key:
            raise RuntimeError("a key is waiting for its value")
        self._store_keys(keys)
        self._store_values(values)
        self.token_count += len(keys)

    # dequantization -----------------------------------------------------------

    @property
    def value_scale(self) -> np.ndarray:
        return np.concatenate(self._v_scale) if self._v_scale else np.zeros(0, np.float32)

    @property
    def value_offset(self) -> np.ndarray:
        return np.concatenate(self._v_offset) if self._v_offset else np.zeros(0, np.float32)

    @property
    def value_degenerate(self) -> np.ndarray:
        return np.concatenate(self._v_degenerate) if self._v_degenerate else np.zeros(0, bool)

    def _key_codes_tokens(self) -> np.ndarray:
        return self.key_codes.unpack()[:, : self.token_count].T

    def dense_keys(self) -> np.ndarray:
        """LUT-dequantized Keys ``[T, d]`` (pre-RoPE), dense part only."""
        kq = self.kq
        return _dense_dequant(self._key_codes_tokens(), kq.codebook.levels, kq.scale, kq.offset, kq.degenerate)

    def dense_values(self) -> np.ndarray:
        codes = self.value_codes.unpack()[: self.token_count * self.dim].reshape(self.token_count, self.dim)
        return _dense_dequant(codes, self.vq.codebook.levels, self.value_scale[:, None],
                              self.value_offset[:, None], self.value_degenerate[:, None])

    def dequantized_keys(self) -> np.ndarray:
        dense = self.dense_keys().astype(np.float64)
        sp = self.key_sparse.to_dense()[: self.token_count]
        return (dense + sp).astype(np.float32)

    def dequantized_values(self) -> np.ndarray:
        dense = self.dense_values().astype(np.float64)
        sp = self.value_sparse.to_dense()[: self.token_count]
        return (dense + sp).astype(np.float32)

    # kernels ------------------------------------------------------------------

    def qk_scores(self, q_rotated) -> np.ndarray:
        """Scores of a RoPE'd query against every cached Key.

        ``q_rotated`` is the full ``[dim]`` query (all heads). Returns ``[T]``
        for a single-head cache, ``[n_heads, T]`` otherwise.

        Dense part: LUT dequantize, rotate each Key to its position, dot.
        Sparse part: each pre-RoPE residual at (t, c) contributes
        ``val * (R_t^T q)[c]``, summed by the balanced kernel.
        """
        q = np.asarray(q_rotated, dtype=np.float32)
        if q.shape != (self.dim,):
            raise ValueError(f"query must have length {self.dim}")
        if self.token_count == 0:
            raise ValueError("cache is empty")
        t, h, d = self.token_count, self.n_heads, self.head_dim
        keys = self.dense_keys().reshape(t, h, d)
        if self.kq.rope is not None:
            keys = rope_apply(self.kq.rope, keys, np.arange(t)[:, None])
        scores = np.einsum("thd,hd->ht", keys, q.reshape(h, d)).astype(np.float64)

        sp = self.key_sparse
        if sp.nnz:
            tok, ch = sp.token_ids(), sp.row_idx
            if self.kq.rope is None:
                coef = q[ch].astype(np.float64)
            else:
                ang = tok * self.kq.rope.inv_freq()[(ch % d) % (d // 2)]
                rh = rotate_half(q.reshape(h, d).astype(np.float64)).reshape(-1)
                coef = q[ch] * np.cos(ang) - rh[ch] * np.sin(ang)
            seg = (ch // d) * t + tok
            scores += balanced_segment_sum(sp.vals * coef, seg, h * t).reshape(h, t)
        return scores[0] if h == 1 else scores

    def av_matvec(self, w) -> np.ndarray:
        """``sum_t w[t] * V_t`` over dequantized Values (dense LUT + balanced CSR).

        ``w`` is ``[T]`` (shared by all heads) or ``[n_heads, T]``; head ``h``'s
        weights produce the output channels of head ``h``.
        """
        w = np.asarray(w, dtype=np.float64)
        t, h, d = self.token_count, self.n_heads, self.head_dim
        if w.shape == (t,):
            return w @ self.dense_values().astype(np.float64) + balanced_spmv_csr(self.value_sparse, w)
        if w.shape != (h, t):
            raise ValueError(f"weights must have shape ({t},) or ({h}, {t})")
        vals = self.dense_values().astype(np.float64).reshape(t, h, d)
        dense = np.einsum("ht,thd->hd", w, vals).reshape(-1)
        sp = self.value_sparse
        ch = sp.col_idx
        products = sp.vals * w[ch // d, sp.token_ids()]
        order = np.argsort(ch, kind="stable")
        return dense + balanced_segment_sum(products[order], ch[order], self.dim)

    # snapshots ----------------------------------------------------------------

    def dump(self, directory: str | Path) -> None:
        """Write KVQT tensors plus a JSON header describing both quantizers."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        if self._pending_key:
            raise RuntimeError("cannot snapshot with a key waiting for its value")
        meta = {"token_count": self.token_count, "dim": self.dim, "n_heads": self.n_heads,
                "key_quantizer": self.kq.to_dict(), "value_quantizer": self.vq.to_dict()}
        (root / "cache.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        write_tensor(self._key_codes_tokens().T.astype(np.float32), root / "key_codes.kvqt")
        codes_v = self.value_codes.unpack()[: self.token_count * self.dim].reshape(self.token_count, self.dim)
        write_tensor(codes_v.astype(np.float32), root / "value_codes.kvqt")
        write_tensor(np.stack([self.value_scale, self.value_offset,
                               self.value_degenerate.astype(np.float32)]), root / "value_affine.kvqt")
        for name, s in (("key_sparse", self.key_sparse), ("value_sparse", self.value_sparse)):
            write_tensor(_triplets(s), root / f"{name}.kvqt")

    @classmethod
    def load(cls, directory: str | Path) -> QuantizedKVCache:
        """Rebuild a cache from :meth:`dump` output (codes are stored, not re-quantized)."""
        root = Path(directory)
        meta = json.loads((root / "cache.json").read_text())
        cache = cls(KeyQuantizer.from_dict(meta["key_quantizer"]), ValueQuantizer.from_dict(meta["value_quantizer"]),
                    meta.get("n_heads", 1))
        t = meta["token_count"]
        kc = read_tensor(root / "key_codes.kvqt").astype(np.uint8)
        vc = read_tensor(root / "value_codes.kvqt").astype(np.uint8)
        aff = read_tensor(root / "value_affine.kvqt")
        cache.key_codes.extend_columns(kc)
        cache.value_codes.extend(vc.reshape(-1))
        cache._v_scale, cache._v_offset = [aff[0].astype(np.float32)], [aff[1].astype(np.float32)]
        cache._v_degenerate = [aff[2] > 0.5]
        for name, s in (("key_sparse", cache.key_sparse), ("value_sparse", cache.value_sparse)):
            tri = read_tensor(root / f"{name}.kvqt")
            tok = tri[:, 0].astype(np.int64)
            vals = tri[:, 2].astype(np.float64) + tri[:, 3].astype(np.float64)
            s._append_many(np.bincount(tok, minlength=t), tri[:, 1].astype(np.int64), vals)
        cache.token_count = t
        return cache


def _triplets(s) -> np.ndarray:
    """``[nnz, 4]``: token, channel, value split into two float32 parts (hi + lo)."""
    hi = s.vals.astype(np.float32)
    lo = (s.vals - hi.astype(np.float64)).astype(np.float32)
    out = np.stack([s.token_ids().astype(np.float32), s._idx.view.astype(np.float32), hi, lo], axis=1)
    return out.reshape(-1, 4)


def qk_scores(cache: QuantizedKVCache, q_rotated) -> np.ndarray:
    return cache.qk_scores(q_rotated)


def av_matvec(cache: QuantizedKVCache, w) -> np.ndarray:
    return cache.av_matvec(w)
