"""Rotary positional embedding, matrix form and element-wise form.

Channel ``i`` is paired with ``i + d/2`` (half-split layout, as in the
Huggingface LLaMA implementation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not self.theta_base > 0:
            raise ValueError("theta_base must be positive")

    def inv_freq(self) -> np.ndarray:
        """theta_i = base^(-2i/d), i = 0..d/2-1, in float64."""
        half = self.head_dim // 2
        return self.theta_base ** (-2.0 * np.arange(half, dtype=np.float64) / self.head_dim)


def cos_sin(params: RopeParams, positions) -> tuple[np.ndarray, np.ndarray]:
    """Full-width cos/sin tables of shape ``positions.shape + (d,)``, float64."""
    pos = np.asarray(positions, dtype=np.float64)
    angles = pos[..., None] * params.inv_freq()
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate(params: RopeParams, x: np.ndarray, positions) -> np.ndarray:
    # angles in f64, multiply in the operand's precision (at least f32)
    dtype = np.result_type(x.dtype, np.float32)
    x = x.astype(dtype, copy=False)
    cos, sin = cos_sin(params, positions)
    return x * cos.astype(dtype) + rotate_half(x) * sin.astype(dtype)


def rope_apply(params: RopeParams, x, n) -> np.ndarray:
    """Rotate ``x[..., d]`` to position ``n`` (scalar, or one position per row)."""
    x = np.asarray(x)
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"expected last dim {params.head_dim}, got {x.shape[-1]}")
    if np.any(np.asarray(n) < 0):
        raise ValueError("positions must be non-negative")
    return _rotate(params, x, n)


def rope_apply_inverse(params: RopeParams, x, n) -> np.ndarray:
    """Apply R_n^T, i.e. rotate by -n. Used to move a query into a key's frame."""
    x = np.asarray(x)
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"expected last dim {params.head_dim}, got {x.shape[-1]}")
    return _rotate(params, x, -np.asarray(n))


def _interleave_to_half_split(d: int) -> np.ndarray:
    """Permutation matrix P with P @ x_interleaved = x_half_split."""
    half = d // 2
    p = np.zeros((d, d))
    for i in range(half):
        p[i, 2 * i] = 1.0
        p[i + half, 2 * i + 1] = 1.0
    return p


def rope_matrix(params: RopeParams, n: int) -> np.ndarray:
    """Dense ``[d, d]`` rotation, built block-diagonally then permuted to half-split order."""
    if n < 0:
        raise ValueError("position must be non-negative")
    d = params.head_dim
    block = np.zeros((d, d))
    for i, theta in enumerate(params.inv_freq()):
        c, s = np.cos(n * theta), np.sin(n * theta)
        block[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
    p = _interleave_to_half_split(d)
    return p @ block @ p.T
