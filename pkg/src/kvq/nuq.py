"""Sensitivity-weighted non-uniform datatype (nuqX).

Vectors are normalized into [-1, 1] by a per-vector affine map, and a
single per-layer codebook of ``2**bits`` signposts is fit to the pooled
normalized calibration values by Fisher-weighted 1-D k-means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

MAX_CALIB_POINTS = 1 << 20
DP_POINTS = 512


@dataclass(frozen=True)
class AffineParams:
    """``x = x_normalized * scale + offset``.

    A degenerate vector (all kept values equal) has ``scale == 1`` and
    decodes to ``offset`` regardless of the code.
    """

    scale: float
    offset: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class QNormStats:
    mu1: float
    sigma1: float
    mu2: float
    sigma2: float

    def __post_init__(self) -> None:
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("Q-Norm standard deviations must be positive")


@dataclass(frozen=True)
class NuqCodebook:
    """Sorted signposts in normalized space.

    ``centroids`` are the encode signposts. When Q-Norm is applied the
    correction is folded into the decode table (``levels``) only, so codes
    are still assigned against the k-means signposts.
    """

    bits: int
    centroids: np.ndarray = field(repr=False)
    qnorm: QNormStats | None = None

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float32)
        object.__setattr__(self, "centroids", c)
        if self.bits not in (2, 3, 4):
            raise ValueError(f"bits must be 2, 3 or 4, got {self.bits}")
        if c.shape != (1 << self.bits,):
            raise ValueError(f"need {1 << self.bits} centroids, got {c.shape}")
        if np.any(np.diff(c) < 0):
            raise ValueError("centroids must be sorted ascending")

    @property
    def qnorm_applied(self) -> bool:
        return self.qnorm is not None

    @property
    def levels(self) -> np.ndarray:
        """Decode lookup table (float32)."""
        if self.qnorm is None:
            return self.centroids
        s = self.qnorm
        c = self.centroids.astype(np.float64)
        return ((c - s.mu2) * s.sigma1 / s.sigma2 + s.mu1).astype(np.float32)

    def boundaries(self) -> np.ndarray:
        c = self.centroids.astype(np.float64)
        return (c[1:] + c[:-1]) / 2

    def to_dict(self, layer_id: int | None = None, tensor_kind: str | None = None) -> dict:
        d: dict = {}
        if layer_id is not None:
            d["layer_id"] = layer_id
        if tensor_kind is not None:
            d["tensor_kind"] = tensor_kind
        d["bits"] = self.bits
        d["centroids"] = [float(x) for x in self.centroids]
        d["qnorm"] = None if self.qnorm is None else {
            "mu1": self.qnorm.mu1, "sigma1": self.qnorm.sigma1,
            "mu2": self.qnorm.mu2, "sigma2": self.qnorm.sigma2,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NuqCodebook:
        q = d.get("qnorm")
        return cls(
            bits=int(d["bits"]),
            centroids=np.asarray(d["centroids"], dtype=np.float32),
            qnorm=None if q is None else QNormStats(**{k: float(q[k]) for k in ("mu1", "sigma1", "mu2", "sigma2")}),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NuqCodebook):
            return NotImplemented
        return (
            self.bits == other.bits
            and np.array_equal(self.centroids, other.centroids)
            and self.qnorm == other.qnorm
        )

    __hash__ = None  # type: ignore[assignment]


def codebook_json(cb: NuqCodebook, layer_id: int, tensor_kind: str) -> str:
    if tensor_kind not in ("key", "value"):
        raise ValueError("tensor_kind must be 'key' or 'value'")
    return json.dumps(cb.to_dict(layer_id, tensor_kind), sort_keys=True)


def normalize_vector(v, lo: float, hi: float) -> tuple[np.ndarray, AffineParams]:
    """Map ``[lo, hi]`` onto ``[-1, 1]``; returns the normalized vector and its affine."""
    if lo > hi:
        raise ValueError(f"lo {lo} > hi {hi}")
    v = np.asarray(v, dtype=np.float32)
    lo32, hi32 = np.float32(lo), np.float32(hi)
    if lo32 == hi32:
        aff = AffineParams(1.0, float(lo32), degenerate=True)
        return (v - lo32).astype(np.float32), aff
    scale = np.float32((hi32 - lo32) / np.float32(2))
    offset = np.float32((hi32 + lo32) / np.float32(2))
    return ((v - offset) / scale).astype(np.float32), AffineParams(float(scale), float(offset))


def affine_arrays(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized form of normalize_vector's affine: (scale, offset, degenerate)."""
    lo = np.asarray(lo, dtype=np.float32)
    hi = np.asarray(hi, dtype=np.float32)
    if np.any(lo > hi):
        raise ValueError("lo > hi")
    degenerate = lo == hi
    scale = np.where(degenerate, np.float32(1), (hi - lo) / np.float32(2)).astype(np.float32)
    offset = np.where(degenerate, lo, (hi + lo) / np.float32(2)).astype(np.float32)
    return scale, offset, degenerate


# --- weighted 1-D k-means ---------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    objective: float
    history: list[float]
    n_iter: int


def _segment_cost(cw: np.ndarray, cwx: np.ndarray, cwxx: np.ndarray) -> np.ndarray:
    """``C[i, j]``: weighted SSE of points ``i..j-1`` around their weighted mean (inf unless i < j)."""
    sw = cw[None, :] - cw[:, None]
    swx = cwx[None, :] - cwx[:, None]
    swxx = cwxx[None, :] - cwxx[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(sw > 0, swxx - swx * swx / sw, 0.0)
    cost = np.maximum(cost, 0.0)
    n = len(cw)
    cost[np.tril_indices(n)] = np.inf
    return cost


def _dp_init(x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    """Globally optimal contiguous k-partition of sorted points, by dynamic programming.

    Above ``DP_POINTS`` distinct values, the points are first merged into
    that many contiguous groups (each at its weighted mean), so the result is
    optimal over partitions that respect the group boundaries.
    """
    keep = w > 0
    x, w = x[keep], w[keep]
    u, inv = np.unique(x, return_inverse=True)
    uw = np.bincount(inv, weights=w)
    if len(u) <= k:
        return np.concatenate([u, np.full(k - len(u), u[-1])])
    if len(u) > DP_POINTS:
        grp = np.arange(len(u)) * DP_POINTS // len(u)
        gw = np.bincount(grp, weights=uw)
        u = np.bincount(grp, weights=uw * u) / gw
        uw = gw
    cw = np.concatenate([[0.0], np.cumsum(uw)])
    cwx = np.concatenate([[0.0], np.cumsum(uw * u)])
    cwxx = np.concatenate([[0.0], np.cumsum(uw * u * u)])
    cost = _segment_cost(cw, cwx, cwxx)
    m = len(u)
    best = cost[0].copy()                       # best[j]: one cluster over points 0..j-1
    arg = np.zeros((k, m + 1), dtype=np.int64)
    for c in range(1, k):
        total = best[:, None] + cost            # split at i: first c clusters end at i
        arg[c] = np.argmin(total, axis=0)
        best = total[arg[c], np.arange(m + 1)]
    cuts = [m]
    for c in range(k - 1, 0, -1):
        cuts.append(int(arg[c][cuts[-1]]))
    cuts = cuts[::-1]
    starts = [0] + cuts[:-1]
    return np.array([(cwx[e] - cwx[s]) / (cw[e] - cw[s]) for s, e in zip(starts, cuts)])


def _assign(x_sorted: np.ndarray, c: np.ndarray) -> np.ndarray:
    # nearest centroid, ties to the lower index; c must be sorted
    mids = (c[1:] + c[:-1]) / 2
    return np.searchsorted(mids, x_sorted, side="left")


def _bounds(x_sorted: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Cluster ``j`` is ``x_sorted[b[j]:b[j+1]]``; same ties as :func:`_assign`."""
    mids = (c[1:] + c[:-1]) / 2
    return np.concatenate([[0], np.searchsorted(x_sorted, mids, side="right"), [len(x_sorted)]])


def _objective(x: np.ndarray, w: np.ndarray, c: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(w * (x - np.repeat(c, np.diff(b))) ** 2))


def fit_weighted_kmeans_1d(points, weights, k: int, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations for ``min sum w_i (x_i - Q(x_i))**2``.

    Deterministic: starts from the dynamic-programming optimum of
    :func:`_dp_init` (exact for up to ``DP_POINTS`` distinct values), then
    refines on the full data. Clusters with zero total weight keep their
    previous centroid. On sorted points every cluster is a contiguous run, so
    the update uses prefix sums.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) == 0 or len(x) != len(w):
        raise ValueError("points and weights must be non-empty and equally long")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not w.sum() > 0:
        raise ValueError("weights are all zero")
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwx = np.concatenate([[0.0], np.cumsum(w * x)])

    c = _dp_init(x, w, k)
    b = _bounds(x, c)
    history = [_objective(x, w, c, b)]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        wsum = cw[b[1:]] - cw[b[:-1]]
        xsum = cwx[b[1:]] - cwx[b[:-1]]
        occupied = wsum > 0
        new = np.where(occupied, xsum / np.where(occupied, wsum, 1.0), c)
        # clip to the cluster's own span: prefix-sum differences can round just outside it
        lo = x[np.minimum(b[:-1], len(x) - 1)]
        hi = x[np.maximum(b[1:] - 1, 0)]
        new = np.where(occupied, np.clip(new, lo, hi), new)
        new = np.sort(new)
        b = _bounds(x, new)
        obj = _objective(x, w, new, b)
        assert obj <= history[-1] * (1 + 1e-9) + 1e-300, "k-means objective increased"
        history.append(obj)
        moved = float(np.max(np.abs(new - c)))
        c = new
        if moved < tol:
            break
    return KMeansResult(centroids=c, objective=history[-1], history=history, n_iter=n_iter)


def weighted_kmeans_1d(points, weights, k: int, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    return fit_weighted_kmeans_1d(points, weights, k, max_iter, tol).centroids


def derive_codebook(normalized_calib, fisher, bits: int, max_points: int = MAX_CALIB_POINTS) -> NuqCodebook:
    """Fit the per-layer datatype to pooled normalized (outlier-free) calibration values."""
    x = np.asarray(normalized_calib, dtype=np.float64).reshape(-1)
    w = np.ones_like(x) if fisher is None else np.asarray(fisher, dtype=np.float64).reshape(-1)
    if len(x) != len(w):
        raise ValueError("calibration points and weights differ in length")
    if len(x) > max_points:
        stride = -(-len(x) // max_points)
        x, w = x[::stride], w[::stride]
    c = np.clip(weighted_kmeans_1d(x, w, 1 << bits), -1.0, 1.0).astype(np.float32)
    uniq = np.unique(c)
    if len(uniq) < len(c):
        c = _pad_distinct(uniq.astype(np.float64), len(c))
    return NuqCodebook(bits, c.astype(np.float32))


def _pad_distinct(uniq: np.ndarray, k: int) -> np.ndarray:
    """Add midpoints of the widest gaps in [-1, 1] until there are ``k`` signposts.

    An extra distinct signpost never raises the k-means objective; the
    codebook needs ``2**bits`` strictly increasing entries.
    """
    c = [float(v) for v in uniq]
    while len(c) < k:
        pts = [min(-1.0, c[0])] + c + [max(1.0, c[-1])]
        j = int(np.argmax(np.diff(pts)))
        c = sorted(set(c) | {(pts[j] + pts[j + 1]) / 2})
    return np.asarray(c, dtype=np.float64)


def apply_qnorm(cb: NuqCodebook, stats: QNormStats) -> NuqCodebook:
    """Attach the mean/std correction ``(C - mu2) * sigma1 / sigma2 + mu1`` to the decode table."""
    if not (stats.sigma1 > 0 and stats.sigma2 > 0):
        raise ValueError("non-positive sigma")
    return replace(cb, qnorm=stats)


def qnorm_stats(normalized_calib, cb: NuqCodebook) -> QNormStats:
    """Two-pass statistics: pre-quantization (mu1, sigma1) and after quantizing with ``cb``."""
    x = np.asarray(normalized_calib, dtype=np.float64).reshape(-1)
    q = cb.centroids.astype(np.float64)[encode_array(x, cb)]
    s1, s2 = float(x.std()), float(q.std())
    return QNormStats(float(x.mean()), max(s1, 1e-12), float(q.mean()), max(s2, 1e-12))


def encode(x: float, cb: NuqCodebook) -> int:
    """Index of the nearest signpost, ties to the lower index. Out-of-range clamps."""
    return int(encode_array(np.asarray([x]), cb)[0])


def encode_array(x, cb: NuqCodebook) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = cb.centroids.astype(np.float64)
    idx = np.searchsorted(c, x, side="left")  # first centroid >= x
    idx = np.clip(idx, 1, len(c) - 1)
    left, right = c[idx - 1], c[idx]
    pick_left = (x - left) <= (right - x)
    return np.where(pick_left, idx - 1, idx).astype(np.uint8)


def decode(code: int, cb: NuqCodebook, aff: AffineParams) -> float:
    if not 0 <= code < len(cb.centroids):
        raise ValueError(f"code {code} out of range")
    if aff.degenerate:
        return float(np.float32(aff.offset))
    return float(cb.levels[code] * np.float32(aff.scale) + np.float32(aff.offset))


def max_gap(cb: NuqCodebook) -> float:
    """Largest adjacent gap of the decode table."""
    return float(np.max(np.diff(cb.levels.astype(np.float64))))


def coverage_gap(cb: NuqCodebook) -> float:
    """Twice the worst nearest-signpost distance over [-1, 1].

    Equals ``max_gap`` when the end signposts sit at -1 and 1; larger when
    k-means pulls them inward.
    """
    c = cb.levels.astype(np.float64)
    return max(max_gap(cb), 2 * (c[0] + 1.0), 2 * (1.0 - c[-1]))
