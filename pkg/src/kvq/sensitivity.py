"""Diagonal Fisher weights and the per-layer sensitivity metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LayerSensitivity:
    layer_id: int
    omega: float

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ValueError("omega must be non-negative")


def fisher_diag(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Sum over samples of ``g * g``. Sum rather than mean: both rankings are scale-free."""
    if len(grads) == 0:
        raise ValueError("need at least one gradient tensor")
    shape = np.shape(grads[0])
    out = np.zeros(shape, dtype=np.float64)
    for g in grads:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ValueError(f"gradient shape {g.shape} != {shape}")
        out += g * g
    return out


def layer_sensitivity(a, qa, f) -> float:
    """Fisher-weighted squared quantization error, ``sum F * (A - Q(A))**2``."""
    a, qa, f = (np.asarray(x, dtype=np.float64) for x in (a, qa, f))
    if not a.shape == qa.shape == f.shape:
        raise ValueError(f"shape mismatch: {a.shape}, {qa.shape}, {f.shape}")
    return float(np.sum(f * (a - qa) ** 2))


def assign_mixed_precision(sens: Sequence[LayerSensitivity], demote_count: int) -> set[int]:
    """Layer ids to run at the lower bit width: the ``demote_count`` least sensitive.

    Ties go to the lower layer id.
    """
    if not 0 <= demote_count <= len(sens):
        raise ValueError(f"demote_count {demote_count} outside [0, {len(sens)}]")
    ranked = sorted(sens, key=lambda s: (s.omega, s.layer_id))
    return {s.layer_id for s in ranked[:demote_count]}
