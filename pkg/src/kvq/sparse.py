"""Per-vector outlier detection and the sparse half of dense-and-sparse storage.

Keys keep outliers in CSC (one column per token), Values in CSR (one row per
token); in both cases appending a token only touches array tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

BALANCE_CHUNK = 10


def outlier_count(f: float, d: int) -> int:
    """round-half-up(f * d)."""
    return int(math.floor(f * d + 0.5))


def _check_fraction(f: float) -> None:
    if not 0 <= f < 0.5:
        raise ValueError(f"outlier fraction must be in [0, 0.5), got {f}")


@dataclass(frozen=True)
class OutlierSplit:
    outlier_indices: np.ndarray
    lo: float
    hi: float


def vector_outlier_split(v, f: float) -> OutlierSplit:
    """Two-sided outliers by order statistics.

    The ``ceil(n/2)`` largest and ``floor(n/2)`` smallest values are outliers,
    ``n = round(f * d)``; ties go to the lower index. ``lo``/``hi`` bound
    the kept elements.
    """
    _check_fraction(f)
    v = np.asarray(v, dtype=np.float32).reshape(-1)
    d = len(v)
    if d < 1:
        raise ValueError("empty vector")
    n_out = outlier_count(f, d)
    if n_out >= d:
        raise ValueError(f"{n_out} outliers leave nothing to keep in a length-{d} vector")
    n_upper = -(-n_out // 2)
    n_lower = n_out // 2
    upper = np.argsort(-v, kind="stable")[:n_upper]
    remaining = np.ones(d, dtype=bool)
    remaining[upper] = False
    rest = np.flatnonzero(remaining)
    lower = rest[np.argsort(v[rest], kind="stable")[:n_lower]]
    out = np.sort(np.concatenate([upper, lower]))
    kept = np.ones(d, dtype=bool)
    kept[out] = False
    return OutlierSplit(out.astype(np.int64), float(v[kept].min()), float(v[kept].max()))


def outlier_thresholds(x: np.ndarray, f: float, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized kept-range bounds for every vector along ``axis``.

    Same bounds as :func:`vector_outlier_split`: after removing the upper and
    lower order statistics, the kept minimum and maximum are fixed ranks of
    the sorted vector.
    """
    _check_fraction(f)
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[axis]
    n_out = outlier_count(f, d)
    if n_out >= d:
        raise ValueError(f"{n_out} outliers leave nothing to keep in a length-{d} vector")
    n_upper = -(-n_out // 2)
    n_lower = n_out // 2
    s = np.sort(x, axis=axis)
    lo = np.take(s, n_lower, axis=axis)
    hi = np.take(s, d - 1 - n_upper, axis=axis)
    return lo, hi


# --- compressed storage ------------------------------------------------------


class _Growable:
    def __init__(self, dtype, capacity: int = 64):
        self._buf = np.zeros(capacity, dtype=dtype)
        self.n = 0

    def extend(self, vals) -> None:
        vals = np.asarray(vals, dtype=self._buf.dtype).reshape(-1)
        need = self.n + len(vals)
        if need > len(self._buf):
            grown = np.zeros(max(need, 2 * len(self._buf)), dtype=self._buf.dtype)
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n : need] = vals
        self.n = need

    @property
    def view(self) -> np.ndarray:
        return self._buf[: self.n]


class _Compressed:
    """Shared machinery for CSC/CSR: one pointer entry per token, append-only.

    Residual values are kept in float64 so that adding them back to the
    float32 dense reconstruction recovers the original float32 exactly.
    """

    def __init__(self, width: int):
        if width < 1:
            raise ValueError("width must be positive")
        self.width = width
        self._ptr = _Growable(np.int64)
        self._ptr.extend([0])
        self._idx = _Growable(np.int64)
        self._vals = _Growable(np.float64)

    @property
    def n_tokens(self) -> int:
        return self._ptr.n - 1

    @property
    def nnz(self) -> int:
        return self._idx.n

    def append_token(self, entries: Iterable[tuple[int, float]]) -> "_Compressed":
        entries = list(entries)
        idx = np.asarray([c for c, _ in entries], dtype=np.int64)
        vals = np.asarray([v for _, v in entries], dtype=np.float64)
        self._append_arrays(idx, vals)
        return self

    def _append_arrays(self, idx: np.ndarray, vals: np.ndarray) -> None:
        if len(idx):
            if idx.min() < 0 or idx.max() >= self.width:
                raise ValueError(f"channel index out of range [0, {self.width})")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("channel indices must be strictly ascending")
        self._idx.extend(idx)
        self._vals.extend(vals)
        self._ptr.extend([self._idx.n])

    def _append_many(self, counts: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
        """Bulk append of several tokens (``counts[t]`` entries each, token-ordered)."""
        if len(idx) and (idx.min() < 0 or idx.max() >= self.width):
            raise ValueError(f"channel index out of range [0, {self.width})")
        base = self._idx.n
        self._idx.extend(idx)
        self._vals.extend(vals)
        self._ptr.extend(base + np.cumsum(counts))

    def token_ids(self) -> np.ndarray:
        """Owning token of every nonzero."""
        return np.repeat(np.arange(self.n_tokens), np.diff(self._ptr.view))

    def to_dense(self) -> np.ndarray:
        """``[tokens, width]`` float64."""
        out = np.zeros((self.n_tokens, self.width))
        out[self.token_ids(), self._idx.view] = self._vals.view
        return out


class SparseCSC(_Compressed):
    """Channels x tokens; column ``t`` holds token ``t``'s outliers."""

    @property
    def n_rows(self) -> int:
        return self.width

    @property
    def col_ptr(self) -> np.ndarray:
        return self._ptr.view

    @property
    def row_idx(self) -> np.ndarray:
        return self._idx.view

    @property
    def vals(self) -> np.ndarray:
        return self._vals.view


class SparseCSR(_Compressed):
    """Tokens x channels; row ``t`` holds token ``t``'s outliers."""

    @property
    def n_cols(self) -> int:
        return self.width

    @property
    def row_ptr(self) -> np.ndarray:
        return self._ptr.view

    @property
    def col_idx(self) -> np.ndarray:
        return self._idx.view

    @property
    def vals(self) -> np.ndarray:
        return self._vals.view


def csc_append_token(s: SparseCSC, entries: Sequence[tuple[int, float]]) -> SparseCSC:
    s.append_token(entries)
    return s


def csr_append_token(s: SparseCSR, entries: Sequence[tuple[int, float]]) -> SparseCSR:
    s.append_token(entries)
    return s


# --- balanced sparse matrix-vector products ----------------------------------


def balanced_segment_sum(products: np.ndarray, segments: np.ndarray, n_out: int, chunk: int = BALANCE_CHUNK) -> np.ndarray:
    """Sum ``products`` into ``n_out`` bins, ``chunk`` nonzeros per work unit.

    Each chunk produces partial sums for the bins it touches; partials are
    merged in chunk order, so the result is reproducible for a fixed chunk.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    out = np.zeros(n_out, dtype=np.float64)
    nnz = len(products)
    if nnz == 0:
        return out
    chunk_id = np.arange(nnz) // chunk
    # a new partial starts wherever the chunk or the output bin changes
    starts = np.flatnonzero(np.r_[True, (np.diff(chunk_id) != 0) | (np.diff(segments) != 0)])
    partial = np.add.reduceat(products.astype(np.float64), starts)
    np.add.at(out, segments[starts], partial)
    return out


def balanced_spmv_csc(s: SparseCSC, x, chunk: int = BALANCE_CHUNK) -> np.ndarray:
    """``y[t] = sum_{nz in column t} val * x[row]``, one output per token."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (s.n_rows,):
        raise ValueError(f"x must have length {s.n_rows}")
    return balanced_segment_sum(s.vals * x[s.row_idx], s.token_ids(), s.n_tokens, chunk)


def balanced_spmv_csr(s: SparseCSR, w, chunk: int = BALANCE_CHUNK) -> np.ndarray:
    """``out[c] = sum_t w[t] * S[t, c]``; the dense operand runs over tokens."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (s.n_tokens,):
        raise ValueError(f"w must have length {s.n_tokens}")
    products = s.vals * w[s.token_ids()]
    # bin by channel: visit nonzeros in channel order so partials stay contiguous
    order = np.argsort(s.col_idx, kind="stable")
    return balanced_segment_sum(products[order], s.col_idx[order], s.n_cols, chunk)
