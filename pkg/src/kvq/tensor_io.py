"""KVQT tensor files and calibration sets.

Layout (little-endian, no padding, no footer)::

    b"KVQT" | u32 version=1 | u32 dtype=0 (f32) | u32 ndim | ndim x u64 dims | f32 payload
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KVQT"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIII")


class TensorFormatError(ValueError):
    """Base class for malformed KVQT files."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteValueError(TensorFormatError):
    pass


def read_tensor(path: str | Path) -> np.ndarray:
    """Load a KVQT file as a float32 array with the stored shape."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw)]:
            raise BadMagicError(f"{path}: not a KVQT file")
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, version, dtype, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: dtype code {dtype}")
    pos = _HEADER.size
    if len(raw) < pos + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: dims truncated")
    shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
    pos += 8 * ndim
    count = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
    expected = pos + 4 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - pos} bytes, need {4 * count}")
    if len(raw) > expected:
        raise TensorFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path}: payload contains NaN or Inf")
    return data.astype(np.float32).reshape(shape)


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    arr = np.asarray(arr, dtype="<f4", order="C")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + dims + arr.tobytes())


@dataclass
class CalibrationSet:
    """Per-sample activations for one layer, each ``[tokens, hidden]``.

    Key activations are pre-RoPE. Gradient lists are empty until filled
    (e.g. by finite differences in the simulator).
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    grads_keys: list[np.ndarray] = field(default_factory=list)
    grads_values: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.keys:
            raise ValueError("calibration set needs at least one sample")
        if len(self.keys) != len(self.values):
            raise ValueError("keys and values sample counts differ")
        for k, v in zip(self.keys, self.values):
            if k.shape != v.shape:
                raise ValueError(f"key shape {k.shape} != value shape {v.shape}")
        for acts, grads in ((self.keys, self.grads_keys), (self.values, self.grads_values)):
            if grads and len(grads) != len(acts):
                raise ValueError("gradient sample count differs from activations")
            for a, g in zip(acts, grads):
                if a.shape != g.shape:
                    raise ValueError(f"gradient shape {g.shape} != activation shape {a.shape}")

    @property
    def has_grads(self) -> bool:
        return bool(self.grads_keys) and bool(self.grads_values)

    @property
    def hidden(self) -> int:
        return self.keys[0].shape[-1]


_NAME = re.compile(r"L(\d+)_S(\d+)\.kvqt$")


def calib_filename(layer: int, sample: int, prefix: str = "") -> str:
    return f"{prefix}L{layer:02d}_S{sample:03d}.kvqt"


def _index_dir(directory: Path, prefix: str = "") -> dict[int, dict[int, Path]]:
    found: dict[int, dict[int, Path]] = {}
    for p in sorted(directory.glob(f"{prefix}L*_S*.kvqt")):
        m = _NAME.search(p.name[len(prefix):])
        if m is None or not p.name.startswith(prefix):
            continue
        found.setdefault(int(m.group(1)), {})[int(m.group(2))] = p
    return found


def load_calibration_dirs(
    keys_dir: str | Path, values_dir: str | Path, grads_dir: str | Path | None = None
) -> dict[int, CalibrationSet]:
    """Read ``L{layer}_S{sample}.kvqt`` files into one CalibrationSet per layer.

    Gradients live in ``grads_dir`` as ``key_L.._S...kvqt`` / ``value_L.._S...kvqt``.
    """
    keys = _index_dir(Path(keys_dir))
    values = _index_dir(Path(values_dir))
    if not keys:
        raise FileNotFoundError(f"no KVQT files in {keys_dir}")
    if set(keys) != set(values):
        raise ValueError("keys and values directories cover different layers")
    gk = _index_dir(Path(grads_dir), "key_") if grads_dir else {}
    gv = _index_dir(Path(grads_dir), "value_") if grads_dir else {}
    out: dict[int, CalibrationSet] = {}
    for layer in sorted(keys):
        samples = sorted(keys[layer])
        if samples != sorted(values[layer]):
            raise ValueError(f"layer {layer}: key/value sample sets differ")
        cs_grads_k: list[np.ndarray] = []
        cs_grads_v: list[np.ndarray] = []
        if grads_dir is not None:
            if sorted(gk.get(layer, {})) != samples or sorted(gv.get(layer, {})) != samples:
                raise ValueError(f"layer {layer}: gradient files missing")
            cs_grads_k = [read_tensor(gk[layer][s]) for s in samples]
            cs_grads_v = [read_tensor(gv[layer][s]) for s in samples]
        out[layer] = CalibrationSet(
            keys=[read_tensor(keys[layer][s]) for s in samples],
            values=[read_tensor(values[layer][s]) for s in samples],
            grads_keys=cs_grads_k,
            grads_values=cs_grads_v,
        )
    return out


def dump_calibration_dirs(sets: dict[int, CalibrationSet], root: str | Path) -> None:
    root = Path(root)
    for sub in ("keys", "values", "grads"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for layer, cs in sets.items():
        for s, (k, v) in enumerate(zip(cs.keys, cs.values)):
            write_tensor(k, root / "keys" / calib_filename(layer, s))
            write_tensor(v, root / "values" / calib_filename(layer, s))
        for s, (gk, gv) in enumerate(zip(cs.grads_keys, cs.grads_values)):
            write_tensor(gk, root / "grads" / calib_filename(layer, s, "key_"))
            write_tensor(gv, root / "grads" / calib_filename(layer, s, "value_"))
